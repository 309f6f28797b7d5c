"""Synthetic speech-like corpora.

Tokens are pronounced as chains of 1-3 HMM states.  Every state owns a mean
vector in feature space; an utterance is produced by emitting
``frames_per_state`` Gaussian frames per state and passing them through a
speaker affine transform and a noise-condition shift.  Dev/test speakers get
larger transforms than training speakers, which is the mismatch that
adaptation is supposed to recover.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

PHONE_CLASSES = ("fricative", "liquid", "nasal", "stop", "vowel")
LEXICAL_CLASSES = ("noun", "verb", "function", "number", "other")
CONDITION_NAMES = ("bus", "caf", "ped", "str")

_PHONE_POOLS = {
    "fricative": "fsvzh",
    "liquid": "lrwy",
    "nasal": "mn",
    "stop": "ptkbdg",
    "vowel": "aeiou",
}

SILENCE_ID = 0
SILENCE_SURFACE = "<sil>"
SILENCE_PHONE = "sil"

FRAME_MAGIC = b"FRM1"


@dataclass(frozen=True)
class Token:
    id: int
    surface: str
    phones: tuple[str, ...]
    lexical_class: str
    n_states: int


@dataclass
class Lexicon:
    """Word inventory plus the acoustic state layout it implies.

    Token 0 is silence.  State indices are assigned in token order, so
    ``state_offset[w] .. state_offset[w] + n_states - 1`` are the acoustic
    model outputs of token ``w``.
    """

    tokens: list[Token]
    phone_classes: dict[str, str]
    state_means: np.ndarray
    silence_id: int = SILENCE_ID
    state_offset: list[int] = field(init=False)

    def __post_init__(self):
        offsets, total = [], 0
        for tok in self.tokens:
            offsets.append(total)
            total += tok.n_states
        self.state_offset = offsets
        if self.state_means.shape[0] != total:
            raise ValueError("state_means rows must equal total number of states")

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token_id):
        return self.tokens[token_id]

    @property
    def n_states(self) -> int:
        return self.state_means.shape[0]

    @property
    def dim(self) -> int:
        return self.state_means.shape[1]

    @property
    def word_ids(self) -> list[int]:
        return [t.id for t in self.tokens if t.id != self.silence_id]

    def states_of(self, token_id: int) -> list[int]:
        off = self.state_offset[token_id]
        return list(range(off, off + self.tokens[token_id].n_states))

    def surface_map(self) -> dict[str, int]:
        return {t.surface: t.id for t in self.tokens}

    def surfaces(self, token_ids) -> list[str]:
        return [self.tokens[i].surface for i in token_ids]

    def ids(self, surfaces) -> list[int]:
        lookup = self.surface_map()
        try:
            return [lookup[s] for s in surfaces]
        except KeyError as exc:
            raise KeyError(f"unknown token surface {exc.args[0]!r}") from None

    def homophones(self, token_id: int) -> list[int]:
        phones = self.tokens[token_id].phones
        return [t.id for t in self.tokens
                if t.id != token_id and t.id != self.silence_id and t.phones == phones]

    def neighbors(self, token_id: int) -> list[int]:
        """Tokens whose phone string is at edit distance exactly 1."""
        phones = self.tokens[token_id].phones
        return [t.id for t in self.tokens
                if t.id != self.silence_id and _phone_distance_is_one(phones, t.phones)]


def _phone_distance_is_one(a, b) -> bool:
    la, lb = len(a), len(b)
    if abs(la - lb) > 1:
        return False
    if la == lb:
        return sum(x != y for x, y in zip(a, b)) == 1
    if la > lb:
        a, b, la, lb = b, a, lb, la
    # b is one longer: dropping one element of b must give a
    return any(b[:i] + b[i + 1:] == a for i in range(lb))


def _phone_inventory(size: int) -> dict[str, str]:
    pools = {c: list(p) for c, p in _PHONE_POOLS.items()}
    capacity = sum(len(p) for p in pools.values())
    if size > capacity:
        raise ValueError(f"phone_inventory_size must be <= {capacity}")
    inventory = {}
    i = 0
    while len(inventory) < size:
        cls = PHONE_CLASSES[i % len(PHONE_CLASSES)]
        if pools[cls]:
            inventory[pools[cls].pop(0)] = cls
        i += 1
    return inventory


def build_lexicon(seed: int, vocab_size: int, phone_inventory_size: int,
                  dim: int = 8, mean_spread: float = 1.0,
                  token_jitter: float = 0.35) -> Lexicon:
    """Deterministic lexicon of ``vocab_size`` words plus silence.

    State means are built from phone embeddings, so homophones share their
    acoustics exactly and lexical neighbours are acoustically close.
    """
    if vocab_size < 5:
        raise ValueError("vocab_size must be >= 5")
    if phone_inventory_size < 5:
        raise ValueError("phone_inventory_size must be >= 5")
    rng = np.random.default_rng(seed)
    phone_classes = _phone_inventory(phone_inventory_size)
    vowels = [p for p, c in phone_classes.items() if c == "vowel"]
    consonants = [p for p, c in phone_classes.items() if c != "vowel"]

    phone_strings: list[tuple[str, ...]] = []
    seen = set()
    while len(phone_strings) < vocab_size:
        length = int(rng.integers(2, 6))
        start_consonant = bool(rng.integers(0, 2))
        phones = []
        for k in range(length):
            pool = consonants if (k % 2 == 0) == start_consonant else vowels
            phones.append(pool[int(rng.integers(len(pool)))])
        phones = tuple(phones)
        if phones not in seen:
            seen.add(phones)
            phone_strings.append(phones)
    if vocab_size >= 20:
        # last word becomes a homophone of the first one
        phone_strings[-1] = phone_strings[0]

    tokens = [Token(SILENCE_ID, SILENCE_SURFACE, (SILENCE_PHONE,), "other", 1)]
    surfaces = {SILENCE_SURFACE}
    n_other = 0
    for i, phones in enumerate(phone_strings):
        tid = i + 1
        cls = LEXICAL_CLASSES[i % len(LEXICAL_CLASSES)]
        if cls == "number":
            surface = str(10 + tid)
        else:
            surface = "".join(phones)
            if cls == "other":
                n_other += 1
                if n_other % 2 == 0:
                    surface = surface[0] + "'" + surface[1:]
        while surface in surfaces:
            surface = surface + "h"
        surfaces.add(surface)
        n_states = min(3, 1 + (len(phones) - 1) // 2)
        tokens.append(Token(tid, surface, phones, cls, n_states))

    phone_vectors = {p: rng.normal(0.0, mean_spread, dim) for p in phone_classes}
    phone_vectors[SILENCE_PHONE] = rng.normal(0.0, mean_spread, dim)
    jitter = {}
    for phones in sorted({t.phones for t in tokens}):
        jitter[phones] = rng.normal(0.0, token_jitter, (3, dim))

    means = []
    for tok in tokens:
        chunks = np.array_split(np.arange(len(tok.phones)), tok.n_states)
        for j, chunk in enumerate(chunks):
            vec = np.mean([phone_vectors[tok.phones[k]] for k in chunk], axis=0)
            # position marker keeps the states of one word apart
            vec = vec * np.sqrt(len(chunk)) + jitter[tok.phones][j]
            means.append(vec)
    return Lexicon(tokens, phone_classes, np.asarray(means))


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("speaker scale must be strictly positive")

    @classmethod
    def identity(cls, speaker_id: str, dim: int) -> "SpeakerProfile":
        return cls(speaker_id, np.zeros(dim), np.ones(dim))


@dataclass(frozen=True)
class NoiseCondition:
    condition_id: str
    shift: np.ndarray
    inflation: float = 1.0

    def __post_init__(self):
        if self.inflation < 1.0:
            raise ValueError("variance inflation must be >= 1")

    @classmethod
    def clean(cls, condition_id: str, dim: int) -> "NoiseCondition":
        return cls(condition_id, np.zeros(dim), 1.0)


@dataclass
class Utterance:
    id: str
    speaker: str
    condition: str
    frames: np.ndarray
    reference: list[int] | None = None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def words(self) -> list[int]:
        """Reference without silence tokens."""
        return [w for w in self.reference or [] if w != SILENCE_ID]


@dataclass
class Corpus:
    name: str
    utterances: list[Utterance]
    split: str = "test"

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.utterances}

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    def subset(self, ids, name=None) -> "Corpus":
        keep = set(ids)
        return Corpus(name or self.name, [u for u in self.utterances if u.id in keep], self.split)


def state_sequence(lexicon: Lexicon, reference) -> list[int]:
    states = []
    for tid in reference:
        if not 0 <= tid < len(lexicon):
            raise KeyError(f"unknown token id {tid}")
        states.extend(lexicon.states_of(tid))
    return states


def generator_alignment(lexicon: Lexicon, reference, frames_per_state: int) -> np.ndarray:
    """Per-frame state index that produced each synthesized frame."""
    return np.repeat(np.asarray(state_sequence(lexicon, reference), dtype=int), frames_per_state)


def synthesize_utterance(lexicon: Lexicon, reference, speaker: SpeakerProfile,
                         condition: NoiseCondition, frames_per_state: int = 3,
                         emission_stddev: float = 0.5, seed=0,
                         utt_id: str = "utt") -> Utterance:
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    if frames_per_state < 1:
        raise ValueError("frames_per_state must be >= 1")
    states = generator_alignment(lexicon, reference, frames_per_state)
    rng = np.random.default_rng(seed)
    clean = lexicon.state_means[states]
    if emission_stddev > 0:
        noise = rng.standard_normal(clean.shape)
        clean = clean + emission_stddev * np.sqrt(condition.inflation) * noise
    frames = clean * speaker.scale + speaker.offset + condition.shift
    return Utterance(utt_id, speaker.speaker_id, condition.condition_id, frames, list(reference))


@dataclass
class BigramGenerator:
    """Sparse random bigram process over word ids used to draw references."""

    word_ids: list[int]
    start: np.ndarray
    transitions: np.ndarray
    stop: np.ndarray

    @classmethod
    def random(cls, word_ids, seed: int, successors: int = 4) -> "BigramGenerator":
        rng = np.random.default_rng(seed)
        n = len(word_ids)
        trans = np.zeros((n, n))
        for i in range(n):
            succ = rng.choice(n, size=min(successors, n), replace=False)
            trans[i, succ] = rng.dirichlet(np.ones(len(succ)) * 0.8)
        start = rng.dirichlet(np.ones(n))
        stop = rng.uniform(0.05, 0.3, n)
        return cls(list(word_ids), start, trans, stop)

    def sample(self, rng: np.random.Generator, min_len: int = 1, max_len: int = 10) -> list[int]:
        n = len(self.word_ids)
        cur = int(rng.choice(n, p=self.start))
        seq = [cur]
        while len(seq) < max_len:
            if len(seq) >= min_len and rng.random() < self.stop[cur]:
                break
            cur = int(rng.choice(n, p=self.transitions[cur]))
            seq.append(cur)
        return [self.word_ids[i] for i in seq]


@dataclass
class CorpusSpec:
    seed: int = 0
    vocab_size: int = 20
    phone_inventory_size: int = 12
    dim: int = 8
    n_speakers: dict = field(default_factory=lambda: {"train": 8, "dev": 4, "test": 4})
    n_utts: dict = field(default_factory=lambda: {"train": 400, "dev": 160, "test": 160})
    length_range: tuple[int, int] = (3, 8)
    mismatch: float = 1.0
    frames_per_state: int = 3
    emission_stddev: float = 0.6
    pause_prob: float = 0.15
    train_offset_sd: float = 0.15
    train_scale_sd: float = 0.05
    offset_sd: float = 0.6
    scale_sd: float = 0.15
    condition_shift_sd: float = 0.25
    mean_spread: float = 1.0
    token_jitter: float = 0.35


@dataclass
class SyntheticCorpora:
    lexicon: Lexicon
    generator: BigramGenerator
    train: Corpus
    dev: Corpus
    test: Corpus
    speakers: dict[str, SpeakerProfile]
    conditions: dict[str, NoiseCondition]
    frames_per_state: int
    length_range: tuple[int, int] = (3, 8)

    def __getitem__(self, split: str) -> Corpus:
        return {"train": self.train, "dev": self.dev, "test": self.test}[split]

    def sample_text(self, n: int, seed: int) -> list[list[int]]:
        rng = np.random.default_rng(seed)
        lo, hi = self.length_range
        return [self.generator.sample(rng, lo, hi) for _ in range(n)]


_SPLIT_PREFIX = {"train": "tr", "dev": "dt", "test": "et"}


def _speakers_for(split, n, dim, rng, spec: CorpusSpec) -> list[SpeakerProfile]:
    out = []
    for i in range(n):
        sid = f"{_SPLIT_PREFIX[split]}{i + 1:02d}"
        if split == "train":
            offset = rng.normal(0.0, spec.train_offset_sd, dim)
            scale = np.exp(rng.normal(0.0, spec.train_scale_sd, dim))
        else:
            offset = spec.mismatch * rng.normal(0.0, spec.offset_sd, dim)
            scale = np.exp(spec.mismatch * rng.normal(0.0, spec.scale_sd, dim))
        out.append(SpeakerProfile(sid, offset, scale))
    return out


def gen_corpus(spec: CorpusSpec) -> SyntheticCorpora:
    """Build train/dev/test corpora with disjoint speakers."""
    for split in ("train", "dev", "test"):
        if spec.n_speakers[split] < 1:
            raise ValueError(f"need at least one speaker in {split}")
        if spec.n_utts[split] < 1:
            raise ValueError(f"need at least one utterance in {split}")
    lo, hi = spec.length_range
    if not 1 <= lo <= hi:
        raise ValueError("invalid length_range")
    if spec.mismatch < 0:
        raise ValueError("mismatch must be >= 0")

    lexicon = build_lexicon(spec.seed, spec.vocab_size, spec.phone_inventory_size,
                            spec.dim, spec.mean_spread, spec.token_jitter)
    generator = BigramGenerator.random(lexicon.word_ids, spec.seed + 1)
    rng = np.random.default_rng([spec.seed, 2])
    conditions = {}
    for name in CONDITION_NAMES:
        shift = rng.normal(0.0, spec.condition_shift_sd, spec.dim)
        conditions[name] = NoiseCondition(name, shift, float(1.0 + rng.uniform(0.0, 0.5)))

    speakers = {}
    corpora = {}
    for split_idx, split in enumerate(("train", "dev", "test")):
        srng = np.random.default_rng([spec.seed, 3, split_idx])
        profiles = _speakers_for(split, spec.n_speakers[split], spec.dim, srng, spec)
        speakers.update({p.speaker_id: p for p in profiles})
        utts = []
        for k in range(spec.n_utts[split]):
            prof = profiles[k % len(profiles)]
            cond = conditions[CONDITION_NAMES[(k // len(profiles)) % len(CONDITION_NAMES)]]
            words = generator.sample(srng, lo, hi)
            reference = [SILENCE_ID]
            for i, w in enumerate(words):
                if i > 0 and srng.random() < spec.pause_prob:
                    reference.append(SILENCE_ID)
                reference.append(w)
            reference.append(SILENCE_ID)
            uid = f"{prof.speaker_id}_{k // len(profiles):04d}"
            utts.append(synthesize_utterance(
                lexicon, reference, prof, cond, spec.frames_per_state,
                spec.emission_stddev, seed=[spec.seed, 4, split_idx, k], utt_id=uid))
        utts.sort(key=lambda u: u.id)
        corpora[split] = Corpus(split, utts, split)

    bundle = SyntheticCorpora(lexicon, generator, corpora["train"], corpora["dev"],
                              corpora["test"], speakers, conditions,
                              spec.frames_per_state, spec.length_range)
    return bundle


def cmvn_per_speaker(corpus: Corpus) -> Corpus:
    """Per-speaker mean/variance normalization (population variance, ddof=0).

    Dimensions with zero variance for a speaker are centred only.
    """
    by_spk: dict[str, list[Utterance]] = {}
    for utt in corpus.utterances:
        by_spk.setdefault(utt.speaker, []).append(utt)
    stats = {}
    for spk, utts in by_spk.items():
        stacked = np.concatenate([u.frames for u in utts], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        flat = std <= 1e-12 * max(1.0, float(np.abs(mean).max()))
        if np.any(flat):
            warnings.warn(f"speaker {spk}: zero-variance dimensions {np.flatnonzero(flat).tolist()} "
                          "centred only", RuntimeWarning, stacklevel=2)
            std = np.where(flat, 1.0, std)
        stats[spk] = (mean, std)
    out = []
    for utt in corpus.utterances:
        mean, std = stats[utt.speaker]
        out.append(replace(utt, frames=(utt.frames - mean) / std))
    return Corpus(corpus.name, out, corpus.split)


def check_split_hygiene(*corpora: Corpus) -> None:
    seen: dict[str, str] = {}
    for corpus in corpora:
        for spk in corpus.speakers:
            if spk in seen and seen[spk] != corpus.name:
                raise ValueError(f"speaker {spk} appears in {seen[spk]} and {corpus.name}")
            seen[spk] = corpus.name


# --- on-disk format -------------------------------------------------------

def write_frames(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    rows, cols = frames.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + struct.pack("<II", rows, cols) + b"\0\0\0\0")
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_frames(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != FRAME_MAGIC:
            raise ValueError(f"{path}: not a FRM1 frames file")
        rows, cols = struct.unpack("<II", header[4:12])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} floats, found {data.size}")
    return data.reshape(rows, cols).astype(np.float64)


def write_corpus(corpus: Corpus, directory, lexicon: Lexicon) -> None:
    os.makedirs(os.path.join(directory, "frames"), exist_ok=True)
    lines = []
    for utt in corpus.utterances:
        rel = os.path.join("frames", f"{utt.id}.frm")
        write_frames(os.path.join(directory, rel), utt.frames)
        ref = " ".join(lexicon.surfaces(utt.reference or []))
        lines.append(f"{utt.id}\t{utt.speaker}\t{utt.condition}\t{rel}\t{ref}\n")
    with open(os.path.join(directory, "manifest.tsv"), "w") as fh:
        fh.writelines(lines)


def read_corpus(directory, lexicon: Lexicon, name=None, split="test") -> Corpus:
    utts = []
    with open(os.path.join(directory, "manifest.tsv")) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"malformed manifest line: {line!r}")
            uid, spk, cond, rel, ref = parts
            frames = read_frames(os.path.join(directory, rel))
            reference = lexicon.ids(ref.split()) if ref.strip() else None
            utts.append(Utterance(uid, spk, cond, frames, reference))
    return Corpus(name or os.path.basename(os.path.normpath(directory)), utts, split)


def write_lexicon(lexicon: Lexicon, path) -> None:
    with open(path, "w") as fh:
        fh.write("# id\tsurface\tphones\tclass\tstates\n")
        for tok in lexicon.tokens:
            fh.write(f"{tok.id}\t{tok.surface}\t{' '.join(tok.phones)}\t"
                     f"{tok.lexical_class}\t{tok.n_states}\n")
        fh.write("# phone classes\n")
        for phone, cls in lexicon.phone_classes.items():
            fh.write(f"#P\t{phone}\t{cls}\n")
        fh.write("# state means\n")
        for row in lexicon.state_means:
            fh.write("#M\t" + " ".join(repr(float(x)) for x in row) + "\n")


def read_lexicon(path) -> Lexicon:
    tokens, phone_classes, means = [], {}, []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#P\t"):
                _, phone, cls = line.split("\t")
                phone_classes[phone] = cls
            elif line.startswith("#M\t"):
                means.append([float(x) for x in line[3:].split()])
            elif line and not line.startswith("#"):
                tid, surface, phones, cls, n_states = line.split("\t")
                tokens.append(Token(int(tid), surface, tuple(phones.split()), cls, int(n_states)))
    return Lexicon(tokens, phone_classes, np.asarray(means))
