"""Deterministic synthetic corpora: a generic domain and a vaccine domain.

Both domains share the same sentence grammar and function words but draw
their content nouns from disjoint pools, giving the distribution shift that
continued pretraining is supposed to bridge. Labeled posts carry stance and
argument labels caused by explicit cue tokens, so every label is auditable
and, at zero noise, recoverable by a keyword oracle. Twitter and Facebook
posts differ in style tokens (hashtags and mentions vs. plain connectives).
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .corpus import RawPost
from .errors import DataError
from .labels import ARGUMENT_CLASSES, LabeledPost

GENERIC_POOL = (
    "trein", "station", "voetbal", "wedstrijd", "muziek", "concert",
    "keuken", "recept", "tuin", "bloemen", "fiets", "vakantie", "strand",
    "boek", "verhaal", "school", "weer", "regen", "zomer", "winter",
)
DOMAIN_POOL = (
    "vaccin", "vaccinatie", "prik", "booster", "corona", "virus",
    "lockdown", "avondklok", "mondkapje", "teststraat", "quarantaine",
    "besmetting", "variant", "dosis", "viroloog", "pandemie", "spuit",
    "campagne", "maatregel", "persconferentie",
)
SUBJECTS = ("ik", "wij", "de buurman", "mijn zus", "de minister", "iedereen",
            "niemand", "het land", "mijn collega", "de dokter")
VERBS = ("bespreekt", "noemt", "ziet", "volgt", "kiest", "zoekt", "vindt",
         "bekijkt", "hoort", "leest")
TAILS = ("vandaag", "morgen", "alweer", "gewoon", "samen", "overal",
         "meteen", "eindelijk", "opnieuw", "nogmaals")

# stance cue variants; the platforms prefer different surface forms (the
# genre gap): the last two variants are facebook slang that never occurs on
# twitter, so a twitter-only fine-tune meets them cold at test time. The
# facebook forms share only stance-neutral stems (vax-, naald-) with each
# other, never an informative stem with a twitter form.
HESITANT_CUES = ("weiger", "wantrouw", "gifspuit", "nooitgeprikt",
                 "vaxangst", "naaldvrees")
CONFIDENT_CUES = ("vertrouw", "steun", "veiliggevoel", "graaggeprikt",
                  "vaxblij", "naaldfan")
CUE_WEIGHTS = {
    "twitter": (0.40, 0.30, 0.20, 0.10, 0.00, 0.00),
    "facebook": (0.10, 0.10, 0.10, 0.10, 0.30, 0.30),
}
# register frames are lexically disjoint so the registers have distinct
# co-occurrence neighbourhoods in the in-domain corpus
HESITANT_FRAME = ("waarschuwt", "tegen", "{0}", "plus", "{1}", "want", "gevaar", "dreigt")
CONFIDENT_FRAME = ("prijst", "juist", "{0}", "en", "{1}", "omdat", "hoop", "groeit")
ARGUMENT_CUES = {
    "development": "testfase",
    "liberty": "vrijheidsbeperking",
    "institutional_motives": "bigpharma",
    "efficacy": "nutteloos",
    "safety": "bijwerkingen",
    "criticism": "wanbeleid",
    "alternative_medicine": "vitamines",
    "conspiracy": "microchip",
}
FACEBOOK_TAILS = ("dat is mijn mening", "wie denkt er net zo",
                  "reacties welkom hieronder", "gedeeld van een vriend")


@dataclass(frozen=True)
class SynthSpec:
    """Generation knobs; pools must stay disjoint so the shift is real."""

    n_pretrain_docs: int = 400
    n_labeled: dict = field(
        default_factory=lambda: {"twitter": 100, "facebook": 100}
    )
    noise_rate: float = 0.0
    seed: int = 0
    generic_pool: tuple[str, ...] = GENERIC_POOL
    domain_pool: tuple[str, ...] = DOMAIN_POOL

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 0.5:
            raise DataError("noise_rate must lie in [0, 0.5)")
        if set(self.generic_pool) & set(self.domain_pool):
            raise DataError("generic and domain pools must be disjoint")
        if self.n_pretrain_docs < 0:
            raise DataError("n_pretrain_docs must be >= 0")

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        kwargs = {}
        for key in ("n_pretrain_docs", "n_labeled", "noise_rate", "seed"):
            if key in obj:
                kwargs[key] = obj[key]
        for key in ("generic_pool", "domain_pool"):
            if key in obj:
                kwargs[key] = tuple(obj[key])
        return cls(**kwargs)


def _sentence(rng: random.Random, pool: tuple[str, ...], extra: list[str]) -> str:
    words = [
        rng.choice(SUBJECTS),
        rng.choice(VERBS),
        "de" if rng.random() < 0.5 else "het",
        rng.choice(pool),
    ]
    if rng.random() < 0.7:
        words += ["en", "de", rng.choice(pool)]
    words.extend(extra)
    words.append(rng.choice(TAILS))
    return " ".join(words)


def gen_pretrain_corpora(spec: SynthSpec) -> tuple[list[RawPost], list[RawPost]]:
    """Two unlabeled corpora: (generic domain A, in-domain B)."""
    out = []
    for domain, pool in (("a", spec.generic_pool), ("b", spec.domain_pool)):
        rng = random.Random((spec.seed, "pretrain", domain).__repr__())
        posts = []
        for i in range(spec.n_pretrain_docs):
            extra: list[str] = []
            if domain == "b":
                # in-domain text clusters by register: sceptical posts frame
                # hesitancy cues (often alongside argument cues), supportive
                # posts frame confidence cues; the rest stays neutral
                register = rng.random()
                if register < 0.4:
                    cues = rng.sample(HESITANT_CUES, 2)
                    extra = [w.format(*cues) for w in HESITANT_FRAME]
                    if rng.random() < 0.6:
                        extra += ["rond", ARGUMENT_CUES[rng.choice(ARGUMENT_CLASSES)]]
                elif register < 0.8:
                    cues = rng.sample(CONFIDENT_CUES, 2)
                    extra = [w.format(*cues) for w in CONFIDENT_FRAME]
            posts.append(
                RawPost(
                    id=f"{domain}-{i:05d}",
                    platform="twitter",
                    text=_sentence(rng, pool, extra),
                )
            )
        out.append(posts)
    return out[0], out[1]


def _style(rng: random.Random, platform: str, pool: tuple[str, ...]) -> list[str]:
    if platform == "twitter":
        extra = [f"#{rng.choice(pool)}"]
        if rng.random() < 0.4:
            extra.append("@USER")
        return extra
    return [rng.choice(FACEBOOK_TAILS)]


def gen_labeled(spec: SynthSpec) -> list[LabeledPost]:
    """Labeled posts whose stance/argument labels follow the cue rules.

    Per platform the first half is hesitant. Hesitant posts carry a
    hesitancy cue plus 0-2 argument cues (their classes become the label
    set); confident posts carry a confidence cue and no argument labels.
    With ``noise_rate`` > 0 labels are corrupted after the text is fixed,
    so the noise is purely in the annotation.
    """
    posts: list[LabeledPost] = []
    for platform in ("twitter", "facebook"):
        n = int(spec.n_labeled.get(platform, 0))
        rng = random.Random((spec.seed, "labeled", platform).__repr__())
        for i in range(n):
            hesitant = i < (n + 1) // 2
            extra: list[str] = []
            arguments: set[str] = set()
            weights = CUE_WEIGHTS[platform]
            if hesitant:
                extra.append(rng.choices(HESITANT_CUES, weights=weights)[0])
                n_args = rng.choices([0, 1, 2], weights=[0.3, 0.45, 0.25])[0]
                for cls in rng.sample(ARGUMENT_CLASSES, n_args):
                    arguments.add(cls)
                    extra.append(ARGUMENT_CUES[cls])
            else:
                extra.append(rng.choices(CONFIDENT_CUES, weights=weights)[0])
            extra.extend(_style(rng, platform, spec.domain_pool))
            text = _sentence(rng, spec.domain_pool, extra)

            stance2 = "hesitant" if hesitant else "not_hesitant"
            if spec.noise_rate > 0 and rng.random() < spec.noise_rate:
                stance2 = "not_hesitant" if hesitant else "hesitant"
            if spec.noise_rate > 0 and rng.random() < spec.noise_rate:
                flip = rng.choice(ARGUMENT_CLASSES)
                arguments ^= {flip}
            stance4 = rng.choice(
                ("anti", "hesitant") if stance2 == "hesitant" else ("neutral", "pro")
            )
            posts.append(
                LabeledPost(
                    id=f"{platform[:2]}-{i:05d}",
                    platform=platform,
                    text=text,
                    stance2=stance2,
                    stance4=stance4,
                    arguments=frozenset(arguments),
                )
            )
    return posts


def keyword_oracle_stance(text: str) -> bool:
    """True (hesitant) iff a hesitancy cue token occurs; the audit oracle."""
    tokens = set(text.split())
    return bool(tokens & set(HESITANT_CUES))


def keyword_oracle_arguments(text: str) -> frozenset[str]:
    tokens = set(text.split())
    return frozenset(c for c, cue in ARGUMENT_CUES.items() if cue in tokens)
