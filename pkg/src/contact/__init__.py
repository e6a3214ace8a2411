"""contact: desk-scale domain-adaptive MLM training and cross-genre evaluation.

Subpackages cover the full workflow: corpus curation (:mod:`contact.corpus`),
subword tokenization (:mod:`contact.tokenizer`), a small transformer encoder
with hand-written backpropagation (:mod:`contact.encoder`), MLM pretraining and
task fine-tuning (:mod:`contact.training`), the evaluation harness with
significance testing (:mod:`contact.evalharness`), a synthetic-corpus generator
(:mod:`contact.synthgen`), and the ``contact`` command line (:mod:`contact.cli`).
"""

__version__ = "0.1.0"
