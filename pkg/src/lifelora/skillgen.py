"""Synthetic skill stream: primitive chains over a small token alphabet.

Each skill is an ordered chain of token-level primitives plus a set of
paraphrased instructions. Skills that share primitives share vocabulary in
their instructions, which is what makes semantic similarity track parameter
similarity downstream.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError

PRIMITIVES = ("shift", "reverse", "swap-pairs", "map", "repeat-first")
PARAMS = {"shift": (1, 2, 3), "map": (0, 1, 2, 3)}
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five")

PHRASES = {
    "shift": ("shift up by {k}", "rotate forward {k}", "advance values {k} steps", "increment by {k}"),
    "map": ("mirror plus {k}", "reflect with offset {k}", "invert then add {k}"),
    "reverse": ("reverse order", "go backwards", "flip back to front"),
    "swap-pairs": ("swap neighbours", "exchange adjacent pairs", "pairwise trade"),
    "repeat-first": ("repeat first", "duplicate leading symbol", "echo opener"),
}
# Frames carry little shared text so that cross-skill similarity comes mostly
# from shared primitive phrases rather than boilerplate.
FRAMES = ("{noun}: {steps}", "{steps} on {noun}", "{noun}, {steps}", "{steps} for {noun}")
JOINERS = (", then ", " and ", "; ")
# every skill gets its own adjective, object and place word, so no two skills
# share any part of their object phrase
NOUNS = tuple(
    f"{a} {n} {p}"
    for a, n, p in zip(
        ("yellow", "crimson", "wooden", "frosted", "rusty", "velvet", "copper", "striped",
         "hollow", "marble", "silky", "dusty", "glossy", "woven", "tiny", "jagged",
         "amber", "minty", "plush", "cobalt", "bronze", "sandy", "ivory", "leafy"),
        ("drawer", "tap", "bulb", "jar", "doll", "bottle", "button", "safe",
         "grill", "rack", "dustpan", "ring", "cube", "lamp", "shelf", "duck",
         "crate", "lid", "peg", "kettle", "spoon", "valve", "hinge", "basket"),
        ("upstairs", "outside", "indoors", "downstairs", "nearby", "overhead", "underneath", "behind",
         "beside", "inside", "aside", "aloft", "ashore", "abroad", "afield", "yonder",
         "below", "above", "within", "beyond", "astern", "adrift", "around", "across"),
    )
)

PROBE_LENGTHS = (4, 5, 7, 8)


@dataclass(frozen=True)
class Vocab:
    """Token layout: data symbols first, instruction-word buckets, then specials."""

    size: int = 32
    n_symbols: int = 16

    def __post_init__(self):
        if self.size - self.n_symbols < 4:
            raise UsageError("vocab needs room for word buckets and three special tokens")

    @property
    def sep(self) -> int:
        return self.size - 3

    @property
    def go(self) -> int:
        return self.size - 2

    @property
    def end(self) -> int:
        return self.size - 1

    @property
    def n_word_buckets(self) -> int:
        return self.size - 3 - self.n_symbols

    def word_token(self, word: str) -> int:
        h = int.from_bytes(hashlib.blake2b(word.encode(), digest_size=4).digest(), "little")
        return self.n_symbols + h % self.n_word_buckets

    def instruction_tokens(self, text: str) -> list[int]:
        words = [w.strip(",.:;") for w in text.lower().split()]
        return [self.word_token(w) for w in words if w]

    def prompt(self, instruction: str, inp) -> tuple[int, ...]:
        return tuple(self.instruction_tokens(instruction) + [self.sep] + list(inp) + [self.go])


def apply_primitive(prim, seq, n_symbols: int) -> list[int]:
    name, k = prim
    seq = list(seq)
    if name == "shift":
        return [(t + k) % n_symbols for t in seq]
    if name == "map":
        return [(n_symbols - 1 - t + k) % n_symbols for t in seq]
    if name == "reverse":
        return seq[::-1]
    if name == "swap-pairs":
        for i in range(0, len(seq) - 1, 2):
            seq[i], seq[i + 1] = seq[i + 1], seq[i]
        return seq
    if name == "repeat-first":
        return seq[:1] + seq
    raise UsageError(f"unknown primitive {name!r}")


def apply_chain(chain, seq, n_symbols: int) -> list[int]:
    """Apply primitives in list order (``chain[0]`` first)."""
    out = list(seq)
    for prim in chain:
        out = apply_primitive(prim, out, n_symbols)
    return out


def prim_label(prim) -> str:
    name, k = prim
    return f"{name}+{k}" if name in PARAMS else name


@dataclass(frozen=True)
class Episode:
    instruction: str
    input: tuple[int, ...]
    target: tuple[int, ...]
    prompt: tuple[int, ...]


@dataclass(frozen=True)
class SkillSpec:
    skill_id: int
    name: str
    noun: str
    chain: tuple[tuple[str, int], ...]
    instructions: tuple[str, ...]
    holdout: bool = False
    n_train: int = 64
    n_eval: int = 25

    @property
    def primitive_set(self) -> frozenset:
        return frozenset(self.chain)


def _phrase(prim, rng, preferred: dict, keep: float) -> str:
    name, k = prim
    pool = PHRASES[name]
    idx = preferred[name] if rng.random() < keep else int(rng.integers(len(pool)))
    return pool[idx].format(k=NUMBER_WORDS[k])


def _paraphrases(chain, noun, m, rng, keep: float = 0.6) -> tuple[str, ...]:
    """``m`` distinct phrasings; each step keeps the skill's preferred wording with prob ``keep``."""
    preferred = {name: int(rng.integers(len(PHRASES[name]))) for name, _ in chain}
    out: list[str] = []
    seen = set()
    attempts = 0
    while len(out) < m:
        attempts += 1
        if attempts > 2000:
            raise UsageError(f"could not draw {m} distinct paraphrases")
        steps = _phrase(chain[0], rng, preferred, keep)
        for prim in chain[1:]:
            steps += str(rng.choice(JOINERS)) + _phrase(prim, rng, preferred, keep)
        text = str(rng.choice(FRAMES)).format(steps=steps, noun=noun)
        if text not in seen:
            seen.add(text)
            out.append(text)
    return tuple(out)


def _behaviour(chain, n_symbols):
    probes = []
    for n in PROBE_LENGTHS:
        seq = [(3 * i + n) % n_symbols for i in range(n)]
        probes.append(tuple(apply_chain(chain, seq, n_symbols)))
    return tuple(probes)


def _draw_prim(name, rng):
    return (name, int(rng.choice(PARAMS[name])) if name in PARAMS else 0)


@dataclass
class SkillStream:
    seed: int
    n_symbols: int
    specs: list[SkillSpec] = field(default_factory=list)
    overlap_prob: float = 0.5

    @property
    def train(self) -> list[SkillSpec]:
        return [s for s in self.specs if not s.holdout]

    @property
    def holdout(self) -> list[SkillSpec]:
        return [s for s in self.specs if s.holdout]

    def relatedness(self, specs=None) -> np.ndarray:
        """Jaccard overlap of primitive sets; unit diagonal."""
        specs = self.specs if specs is None else specs
        n = len(specs)
        out = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                a, b = specs[i].primitive_set, specs[j].primitive_set
                out[i, j] = out[j, i] = len(a & b) / len(a | b)
        return out

    def shared_counts(self, specs=None) -> np.ndarray:
        specs = self.specs if specs is None else specs
        return np.array([[len(a.primitive_set & b.primitive_set) for b in specs] for a in specs])

    def episodes(self, spec: SkillSpec, split: str, vocab: Vocab, count: int | None = None) -> list[Episode]:
        if split not in ("train", "eval"):
            raise UsageError(f"unknown split {split!r}")
        if count is None:
            count = spec.n_train if split == "train" else spec.n_eval
        rng = np.random.default_rng([self.seed, spec.skill_id, 0 if split == "train" else 1])
        return [render_episode(spec, rng, vocab, self.n_symbols) for _ in range(count)]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_symbols": self.n_symbols,
            "overlap_prob": self.overlap_prob,
            "specs": [
                {**asdict(s), "chain": [list(p) for p in s.chain], "instructions": list(s.instructions)}
                for s in self.specs
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkillStream":
        try:
            specs = [
                SkillSpec(
                    skill_id=int(s["skill_id"]),
                    name=s["name"],
                    noun=s["noun"],
                    chain=tuple((str(p[0]), int(p[1])) for p in s["chain"]),
                    instructions=tuple(s["instructions"]),
                    holdout=bool(s["holdout"]),
                    n_train=int(s["n_train"]),
                    n_eval=int(s["n_eval"]),
                )
                for s in d["specs"]
            ]
            return cls(int(d["seed"]), int(d["n_symbols"]), specs, float(d.get("overlap_prob", 0.5)))
        except (KeyError, TypeError, IndexError) as exc:
            raise FormatError(f"malformed stream document: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SkillStream":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not JSON ({exc})") from exc


def render_episode(spec: SkillSpec, rng: np.random.Generator, vocab: Vocab, n_symbols: int | None = None,
                   min_len: int = 4, max_len: int = 8) -> Episode:
    n_symbols = vocab.n_symbols if n_symbols is None else n_symbols
    n = int(rng.integers(min_len, max_len + 1))
    inp = tuple(int(t) for t in rng.integers(0, n_symbols, size=n))
    instruction = str(spec.instructions[int(rng.integers(len(spec.instructions)))])
    target = tuple(apply_chain(spec.chain, inp, n_symbols))
    return Episode(instruction, inp, target, vocab.prompt(instruction, inp))


def generate_stream(seed: int = 0, n_train_skills: int = 8, n_holdout: int = 2, *, overlap_prob: float = 0.5,
                    n_paraphrases: int = 8, n_symbols: int = 16, n_train_episodes: int = 64,
                    n_eval_episodes: int = 25) -> SkillStream:
    if n_train_skills < 1 or n_holdout < 0 or n_train_skills + n_holdout > len(NOUNS):
        raise UsageError(f"need at least one training skill and at most {len(NOUNS)} skills in total")
    if not 0.0 <= overlap_prob <= 1.0:
        raise UsageError("overlap_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    nouns = [str(n) for n in rng.permutation(NOUNS)]
    behaviours = set()
    specs: list[SkillSpec] = []

    def make(sid, chain, holdout):
        noun = nouns[sid]
        label = "+".join(prim_label(p) for p in chain)
        instr = _paraphrases(chain, noun, n_paraphrases, rng)
        return SkillSpec(sid, f"{noun.replace(' ', '-')}:{label}", noun, tuple(chain), instr, holdout,
                         n_train_episodes, n_eval_episodes)

    for t in range(n_train_skills):
        for _ in range(1000):
            length = int(rng.integers(1, 4))
            chain = []
            if t > 0 and rng.random() < overlap_prob:
                prev = specs[-1].chain
                chain.append(prev[int(rng.integers(len(prev)))])
            names = [n for n in PRIMITIVES if n not in {p[0] for p in chain}]
            while len(chain) < length:
                name = str(rng.choice(names))
                names.remove(name)
                chain.append(_draw_prim(name, rng))
            order = rng.permutation(len(chain))
            chain = [chain[i] for i in order]
            beh = _behaviour(chain, n_symbols)
            if beh not in behaviours:
                behaviours.add(beh)
                break
        else:
            raise UsageError("could not draw a distinct training chain")
        specs.append(make(t, chain, False))

    pool = sorted({p for s in specs for p in s.chain})
    for h in range(n_holdout):
        for _ in range(1000):
            length = int(rng.integers(1, min(3, len(pool)) + 1))
            picks = [pool[i] for i in rng.permutation(len(pool))]
            chain, used = [], set()
            for p in picks:
                if p[0] not in used:
                    chain.append(p)
                    used.add(p[0])
                if len(chain) == length:
                    break
            beh = _behaviour(chain, n_symbols)
            if beh not in behaviours:
                behaviours.add(beh)
                break
        else:
            raise UsageError("could not draw a distinct holdout chain from the trained primitives")
        specs.append(make(n_train_skills + h, chain, True))
    return SkillStream(seed, n_symbols, specs, overlap_prob)
