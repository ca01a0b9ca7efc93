"""Deterministic synthetic toy-language corpus.

A language is a phoneme inventory, a lexicon mapping words to phoneme
strings, a bigram sentence grammar, and one Gaussian prototype vector per
phoneme. Acoustics for an utterance are the phoneme prototypes repeated for
random durations with additive noise. The lexicon always contains a
prefix/suffix triple (pronunciations A, C, and A+C) so that removing the
word-boundary marker provably creates ambiguous tokenizations.

Everything is seeded: the same (seed, config) reproduces the language, the
datasets, and the serialized file bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DatasetParseError
from .models import PhonemeInventory, WordVocab, insert_wb

WORD_LENGTH_WEIGHTS = {1: 0.05, 2: 0.25, 3: 0.30, 4: 0.22, 5: 0.12, 6: 0.06}


@dataclass
class SynthConfig:
    """Knobs of the synthetic corpus generator."""

    feature_dim: int = 36
    n_phonemes: int = 14
    n_words: int = 200
    frames_per_phoneme: tuple[int, int] = (4, 8)
    wb_frames: tuple[int, int] = (1, 2)
    noise_std: float = 0.5
    proto_scale: float = 2.0
    sentence_len: tuple[int, int] = (2, 6)
    bigram_temperature: float = 1.0
    homophone_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ConfigurationError("feature_dim must be >= 2")
        if self.n_phonemes < 4:
            raise ConfigurationError("n_phonemes must be >= 4")
        if self.n_words < 10:
            raise ConfigurationError("n_words must be >= 10")
        for name, rng_pair in (("frames_per_phoneme", self.frames_per_phoneme),
                               ("wb_frames", self.wb_frames),
                               ("sentence_len", self.sentence_len)):
            lo, hi = rng_pair
            if lo < 1 or hi < lo:
                raise ConfigurationError(f"{name} range {rng_pair} invalid")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")


@dataclass
class Lexicon:
    """Ordered (word, phoneme-id string) pairs; word id = position."""

    entries: list[tuple[str, list[int]]]

    def __post_init__(self):
        names = [w for w, _ in self.entries]
        if len(set(names)) != len(names):
            raise ConfigurationError("lexicon words must be unique")

    def __len__(self):
        return len(self.entries)

    def phonemes_for(self, word_id: int) -> list[int]:
        return self.entries[word_id][1]

    def word_names(self) -> list[str]:
        return [w for w, _ in self.entries]


@dataclass
class BigramGrammar:
    initial: np.ndarray   # (V,)
    transitions: np.ndarray  # (V, V), row-stochastic


@dataclass
class ToyLanguage:
    inventory: PhonemeInventory
    lexicon: Lexicon
    grammar: BigramGrammar
    prototypes: np.ndarray  # (inventory.size, feature_dim)
    config: SynthConfig

    @property
    def vocab(self) -> WordVocab:
        return WordVocab(self.lexicon.word_names())


@dataclass
class Utterance:
    """One sample: word ids, the derived phoneme ids (word boundaries
    included), and for acoustic sets the feature matrix."""

    utt_id: str
    words: list[int]
    phonemes: list[int]
    features: Optional[np.ndarray] = None

    @property
    def num_frames(self) -> int:
        return 0 if self.features is None else self.features.shape[0]


@dataclass
class Datasets:
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    text_train: list[Utterance]
    text_dev: list[Utterance]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _sample_pronunciation(rng: np.random.Generator, n_phonemes: int) -> list[int]:
    lengths = np.array(sorted(WORD_LENGTH_WEIGHTS))
    weights = np.array([WORD_LENGTH_WEIGHTS[k] for k in lengths], dtype=float)
    length = int(rng.choice(lengths, p=weights / weights.sum()))
    return [int(p) for p in rng.integers(0, n_phonemes, size=length)]


def build_toy_language(cfg: SynthConfig) -> ToyLanguage:
    """Seeded construction of inventory, lexicon, grammar, and prototypes.

    The first three lexicon entries are the constructed ambiguity triple:
    pronunciations A, C, and B = A + C, so word 2's phoneme string has word
    0's as a strict prefix and the sequences [B] and [A, C] collide once the
    boundary marker is stripped.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_phonemes
    # rough capacity guard for unique pronunciations of length <= 6
    capacity = sum(n ** k for k in range(1, 7))
    if cfg.n_words > capacity // 2:
        raise ConfigurationError(
            f"{cfg.n_words} words do not fit in the pronunciation space of "
            f"{n} phonemes")

    phoneme_names = [f"p{k:02d}" for k in range(n)]
    inventory = PhonemeInventory.build(phoneme_names)

    prefix = [int(p) for p in rng.integers(0, n, size=2)]
    suffix = [int(p) for p in rng.integers(0, n, size=2)]
    prons: list[list[int]] = [prefix, suffix, prefix + suffix]
    seen = {tuple(p) for p in prons}
    n_homophones = int(round(cfg.homophone_rate * cfg.n_words))
    homophones_left = n_homophones
    while len(prons) < cfg.n_words:
        remaining = cfg.n_words - len(prons)
        if homophones_left >= remaining and len(prons) >= 3:
            pron = list(prons[int(rng.integers(0, len(prons)))])
            homophones_left -= 1
            prons.append(pron)
            continue
        for _ in range(1000):
            pron = _sample_pronunciation(rng, n)
            if tuple(pron) not in seen:
                break
        else:
            raise ConfigurationError("could not sample a fresh pronunciation")
        seen.add(tuple(pron))
        prons.append(pron)

    lexicon = Lexicon([(f"w{k:03d}", pron) for k, pron in enumerate(prons)])

    v = cfg.n_words
    tau = max(cfg.bigram_temperature, 1e-6)
    initial = _softmax(rng.standard_normal(v) / tau)
    transitions = np.vstack([_softmax(rng.standard_normal(v) / tau) for _ in range(v)])

    prototypes = rng.standard_normal((inventory.size, cfg.feature_dim)) * cfg.proto_scale
    return ToyLanguage(inventory, lexicon, BigramGrammar(initial, transitions),
                       prototypes, cfg)


def sample_sentence(grammar: BigramGrammar, length_range: tuple[int, int],
                    rng: np.random.Generator) -> list[int]:
    """Markov-chain word sequence with a uniformly sampled length."""
    lo, hi = length_range
    length = int(rng.integers(lo, hi + 1))
    v = grammar.initial.shape[0]
    words = [int(rng.choice(v, p=grammar.initial))]
    for _ in range(length - 1):
        words.append(int(rng.choice(v, p=grammar.transitions[words[-1]])))
    return words


def synth_features(phonemes: Sequence[int], lang: ToyLanguage,
                   rng: np.random.Generator) -> np.ndarray:
    """Prototype of each phoneme repeated for a sampled duration, plus
    Gaussian noise. The word-boundary marker uses its own, shorter,
    duration range."""
    if len(phonemes) == 0:
        raise ConfigurationError("cannot synthesize an empty phoneme sequence")
    cfg = lang.config
    blocks = []
    for p in phonemes:
        lo, hi = cfg.wb_frames if p == lang.inventory.wb_id else cfg.frames_per_phoneme
        duration = int(rng.integers(lo, hi + 1))
        block = np.tile(lang.prototypes[p], (duration, 1))
        if cfg.noise_std > 0:
            block = block + rng.standard_normal(block.shape) * cfg.noise_std
        blocks.append(block)
    return np.vstack(blocks)


def utterance_for_words(words: Sequence[int], lang: ToyLanguage, utt_id: str,
                        rng: Optional[np.random.Generator]) -> Utterance:
    phonemes = insert_wb([lang.lexicon.phonemes_for(w) for w in words],
                         lang.inventory.wb_id)
    features = None if rng is None else synth_features(phonemes, lang, rng)
    return Utterance(utt_id, [int(w) for w in words], phonemes, features)


def generate_datasets(lang: ToyLanguage, n_train: int, n_dev: int, n_test: int,
                      n_text: int, n_text_dev: int) -> Datasets:
    """Seeded splits with disjoint sentences across splits (a word sequence
    sampled for one split is rejected for every other)."""
    for name, count in (("train", n_train), ("dev", n_dev), ("test", n_test),
                        ("text", n_text), ("text_dev", n_text_dev)):
        if count < 1:
            raise ConfigurationError(f"{name} split size must be >= 1")
    cfg = lang.config
    used: set[tuple] = set()

    def make_split(tag: str, count: int, stream: int, acoustic: bool) -> list[Utterance]:
        sent_rng = np.random.default_rng([cfg.seed, stream])
        feat_rng = np.random.default_rng([cfg.seed, stream + 1]) if acoustic else None
        split_sentences: set[tuple] = set()
        utts = []
        tries = 0
        while len(utts) < count:
            words = tuple(sample_sentence(lang.grammar, cfg.sentence_len, sent_rng))
            tries += 1
            if tries > 200 * count + 1000:
                raise ConfigurationError(
                    f"sentence space too small to fill split '{tag}' disjointly")
            if words in used:
                continue
            split_sentences.add(words)
            utts.append(utterance_for_words(
                words, lang, f"{tag}-{len(utts):06d}", feat_rng))
        used.update(split_sentences)
        return utts

    return Datasets(
        train=make_split("train", n_train, 10, acoustic=True),
        dev=make_split("dev", n_dev, 20, acoustic=True),
        test=make_split("test", n_test, 30, acoustic=True),
        text_train=make_split("text", n_text, 40, acoustic=False),
        text_dev=make_split("textdev", n_text_dev, 50, acoustic=False),
    )


# ---------------------------------------------------------------------------
# File formats.
#
# Lexicon: one `word<TAB>ph1 ph2 ...` line per entry (phoneme names; the
# word-boundary marker is added programmatically, never stored).
#
# Dataset: one record per line, tab-separated fields:
#   utt_id  TAB  word ids  TAB  phoneme ids [ TAB T D  TAB hex floats ]
# Features are serialized as C hex floats so values round-trip exactly.
# ---------------------------------------------------------------------------

def save_lexicon(path, lexicon: Lexicon, inventory: PhonemeInventory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, phones in lexicon.entries:
            names = " ".join(inventory.symbols[p] for p in phones)
            fh.write(f"{word}\t{names}\n")


def load_lexicon(path, inventory: PhonemeInventory) -> Lexicon:
    sym_to_id = {s: k for k, s in enumerate(inventory.symbols)}
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].strip():
                raise DatasetParseError(path, line_no, "expected 'word<TAB>phonemes'")
            word, names = parts
            try:
                phones = [sym_to_id[s] for s in names.split()]
            except KeyError as exc:
                raise DatasetParseError(path, line_no, f"unknown phoneme {exc}") from None
            entries.append((word, phones))
    return Lexicon(entries)


def save_dataset(path, utts: Sequence[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utts:
            words = " ".join(str(w) for w in utt.words)
            phones = " ".join(str(p) for p in utt.phonemes)
            if utt.features is None:
                fh.write(f"{utt.utt_id}\t{words}\t{phones}\n")
            else:
                t_len, dim = utt.features.shape
                values = " ".join(float.hex(float(x)) for x in utt.features.reshape(-1))
                fh.write(f"{utt.utt_id}\t{words}\t{phones}\t{t_len} {dim}\t{values}\n")


def load_dataset(path) -> list[Utterance]:
    utts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 5):
                raise DatasetParseError(path, line_no,
                                        f"expected 3 or 5 fields, got {len(parts)}")
            utt_id, words_s, phones_s = parts[:3]
            try:
                words = [int(w) for w in words_s.split()]
                phones = [int(p) for p in phones_s.split()]
            except ValueError:
                raise DatasetParseError(path, line_no, "non-integer id") from None
            features = None
            if len(parts) == 5:
                try:
                    t_len, dim = (int(x) for x in parts[3].split())
                    flat = np.array([float.fromhex(x) for x in parts[4].split()])
                except ValueError:
                    raise DatasetParseError(path, line_no, "malformed feature block") from None
                if flat.size != t_len * dim:
                    raise DatasetParseError(
                        path, line_no,
                        f"feature block has {flat.size} values, expected {t_len * dim}")
                features = flat.reshape(t_len, dim)
            utts.append(Utterance(utt_id, words, phones, features))
    return utts


def save_language_meta(path, lang: ToyLanguage) -> None:
    """Names and reserved ids needed to interpret id-coded datasets."""
    import json

    # built inventories put the reserved wb/blank symbols last
    meta = {
        "phonemes": lang.inventory.symbols[:-2],
        "words": lang.lexicon.word_names(),
    }
    Path(path).write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def load_language_meta(path) -> tuple[PhonemeInventory, WordVocab]:
    import json

    meta = json.loads(Path(path).read_text(encoding="utf-8"))
    return PhonemeInventory.build(meta["phonemes"]), WordVocab(meta["words"])
