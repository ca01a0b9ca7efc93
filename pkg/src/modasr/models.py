"""The four sequence models and their composition.

* A2PModel: acoustic frames -> phoneme posteriors (CTC-trained).
* P2WCtcModel: phoneme distributions -> word posteriors (CTC-trained).
* P2WS2SModel: attention encoder-decoder from phoneme distributions to words.
* DirectA2WModel: acoustic frames -> word posteriors, the monolithic baseline.
* A2WStack: A2P -> blank-frame subsampling -> P2W, decoded end to end.

Word models consume rows that are probability distributions over the
phoneme inventory: exact one-hots when trained from text, raw subsampled
posteriors when stacked under an acoustic front end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .ctc import PosteriorSeq
from .errors import ConfigurationError, DataError, UsageError
from .psd import CompactPosteriorSeq, PsdConfig, psd_filter

WB_SYMBOL = "wb"
BLANK_SYMBOL = "<blank>"


@dataclass
class PhonemeInventory:
    """Ordered phoneme alphabet with the reserved word-boundary and blank
    symbols at the end."""

    symbols: list[str]
    blank_id: int
    wb_id: int

    def __post_init__(self):
        if len(self.symbols) < 3:
            raise ConfigurationError("inventory needs at least 3 symbols")
        if self.blank_id == self.wb_id:
            raise ConfigurationError("blank and wb must be distinct")

    @classmethod
    def build(cls, phoneme_names: Sequence[str]) -> "PhonemeInventory":
        symbols = list(phoneme_names) + [WB_SYMBOL, BLANK_SYMBOL]
        return cls(symbols, blank_id=len(symbols) - 1, wb_id=len(symbols) - 2)

    @property
    def size(self) -> int:
        return len(self.symbols)

    def to_dict(self) -> dict:
        return {"symbols": self.symbols, "blank_id": self.blank_id, "wb_id": self.wb_id}

    @classmethod
    def from_dict(cls, d: dict) -> "PhonemeInventory":
        return cls(list(d["symbols"]), d["blank_id"], d["wb_id"])


@dataclass
class WordVocab:
    """Ordered word list plus reserved ids: a word-level blank for CTC and
    sos/eos for the attention decoder. Output layers cover all of them."""

    words: list[str]

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def blank_id(self) -> int:
        return len(self.words)

    @property
    def sos_id(self) -> int:
        return len(self.words) + 1

    @property
    def eos_id(self) -> int:
        return len(self.words) + 2

    @property
    def size(self) -> int:
        return len(self.words) + 3

    def to_dict(self) -> dict:
        return {"words": self.words}

    @classmethod
    def from_dict(cls, d: dict) -> "WordVocab":
        return cls(list(d["words"]))


def insert_wb(word_phonemes: Sequence[Sequence[int]], wb_id: int) -> list[int]:
    """Append the word-boundary marker to each word's phoneme string and
    concatenate: [[ow, k, ey]] -> [ow, k, ey, wb]."""
    out: list[int] = []
    for phones in word_phonemes:
        out.extend(int(p) for p in phones)
        out.append(wb_id)
    return out


def split_at_wb(phonemes: Sequence[int], wb_id: int) -> list[list[int]]:
    """Inverse of insert_wb for well-formed sequences."""
    words: list[list[int]] = []
    current: list[int] = []
    for p in phonemes:
        if p == wb_id:
            words.append(current)
            current = []
        else:
            current.append(int(p))
    if current:
        raise DataError("phoneme sequence does not end on a word boundary")
    return words


def one_hot_rows(ids: Sequence[int], dim: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= dim):
        raise DataError("one-hot id out of range")
    rows = np.zeros((len(ids), dim), dtype=np.float64)
    rows[np.arange(len(ids)), ids] = 1.0
    return rows


class _RecognizerBase:
    """Shared plumbing for LSTM-stack + dense + log-softmax recognizers."""

    def __init__(self, name: str, input_dim: int, output_dim: int,
                 num_layers: int, cell_dim: int, proj_dim: Optional[int],
                 seed: int):
        rng = np.random.default_rng(seed)
        cfg = nn.LstmConfig(input_dim=input_dim, cell_dim=cell_dim,
                            projection_dim=proj_dim, num_layers=num_layers)
        self.stack = nn.LstmStack(name, cfg, rng)
        # zero-init output layer: an untrained model yields uniform rows
        self.out = nn.Dense(f"{name}.out", self.stack.output_dim, output_dim,
                            zero_init=True)
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.seed = seed

    def parameters(self) -> list[nn.Parameter]:
        return self.stack.parameters() + self.out.parameters()

    def forward_batch(self, x: np.ndarray, mask: Optional[np.ndarray] = None):
        """x: (T, B, D) -> per-frame log-probs (T, B, K)."""
        hidden, caches = self.stack.forward(x, mask)
        logits, dense_cache = self.out.forward(hidden)
        log_probs = nn.log_softmax_rows(logits)
        return log_probs, (caches, dense_cache, log_probs)

    def backward_batch(self, grad_log_probs: np.ndarray, cache) -> np.ndarray:
        caches, dense_cache, log_probs = cache
        grad_logits = nn.log_softmax_backward(grad_log_probs, log_probs)
        grad_hidden = self.out.backward(grad_logits, dense_cache)
        return self.stack.backward(grad_hidden, caches)

    def set_frozen(self, frozen: bool) -> None:
        for p in self.parameters():
            p.frozen = frozen

    def param_bytes(self) -> bytes:
        return b"".join(p.value.tobytes() for p in self.parameters())

    def _save(self, path, config: dict) -> None:
        nn.save_checkpoint(path, self.parameters(), config, self.seed)

    def _restore_params(self, params: list[nn.Parameter]) -> None:
        own = self.parameters()
        if [p.name for p in own] != [p.name for p in params]:
            raise ConfigurationError("checkpoint does not match model topology")
        for mine, theirs in zip(own, params):
            if mine.value.shape != theirs.value.shape:
                raise ConfigurationError(
                    f"shape mismatch for {mine.name}: "
                    f"{mine.value.shape} vs {theirs.value.shape}")
            mine.value[...] = theirs.value
            mine.frozen = theirs.frozen


class A2PModel(_RecognizerBase):
    """Acoustics-to-phoneme recognizer: LSTM stack + dense + log-softmax
    over the phoneme inventory (blank included)."""

    KIND = "a2p"

    def __init__(self, feature_dim: int, inventory: PhonemeInventory,
                 num_layers: int = 3, cell_dim: int = 128,
                 proj_dim: Optional[int] = 64, seed: int = 0):
        super().__init__("a2p", feature_dim, inventory.size,
                         num_layers, cell_dim, proj_dim, seed)
        self.inventory = inventory
        self.topology = {"kind": self.KIND, "feature_dim": feature_dim,
                         "num_layers": num_layers, "cell_dim": cell_dim,
                         "proj_dim": proj_dim}

    def posteriors(self, features: np.ndarray) -> PosteriorSeq:
        log_probs, _ = self.forward_batch(np.asarray(features)[:, None, :])
        return PosteriorSeq(log_probs[:, 0, :], self.inventory.blank_id)

    def save(self, path) -> None:
        self._save(path, dict(self.topology, inventory=self.inventory.to_dict()))

    @classmethod
    def load(cls, path) -> "A2PModel":
        params, config, seed = nn.load_checkpoint(path)
        if config.get("kind") != cls.KIND:
            raise ConfigurationError(f"not an {cls.KIND} checkpoint: {path}")
        model = cls(config["feature_dim"],
                    PhonemeInventory.from_dict(config["inventory"]),
                    config["num_layers"], config["cell_dim"],
                    config["proj_dim"], seed)
        model._restore_params(params)
        return model


class P2WCtcModel(_RecognizerBase):
    """Phoneme-distributions-to-word recognizer trained with word-level CTC."""

    KIND = "p2w_ctc"

    def __init__(self, inventory: PhonemeInventory, vocab: WordVocab,
                 num_layers: int = 2, cell_dim: int = 96,
                 proj_dim: Optional[int] = None, seed: int = 0):
        super().__init__("p2w_ctc", inventory.size, vocab.size,
                         num_layers, cell_dim, proj_dim, seed)
        self.inventory = inventory
        self.vocab = vocab
        self.topology = {"kind": self.KIND, "num_layers": num_layers,
                         "cell_dim": cell_dim, "proj_dim": proj_dim}

    def posteriors(self, phone_rows: np.ndarray) -> PosteriorSeq:
        log_probs, _ = self.forward_batch(np.asarray(phone_rows)[:, None, :])
        return PosteriorSeq(log_probs[:, 0, :], self.vocab.blank_id)

    def save(self, path) -> None:
        self._save(path, dict(self.topology,
                              inventory=self.inventory.to_dict(),
                              vocab=self.vocab.to_dict()))

    @classmethod
    def load(cls, path) -> "P2WCtcModel":
        params, config, seed = nn.load_checkpoint(path)
        if config.get("kind") != cls.KIND:
            raise ConfigurationError(f"not a {cls.KIND} checkpoint: {path}")
        model = cls(PhonemeInventory.from_dict(config["inventory"]),
                    WordVocab.from_dict(config["vocab"]),
                    config["num_layers"], config["cell_dim"],
                    config["proj_dim"], seed)
        model._restore_params(params)
        return model


class DirectA2WModel(_RecognizerBase):
    """Monolithic acoustics-to-word CTC baseline: same body as the phoneme
    recognizer, word output layer."""

    KIND = "a2w_direct"

    def __init__(self, feature_dim: int, vocab: WordVocab,
                 num_layers: int = 3, cell_dim: int = 128,
                 proj_dim: Optional[int] = 64, seed: int = 0):
        super().__init__("a2w", feature_dim, vocab.size,
                         num_layers, cell_dim, proj_dim, seed)
        self.vocab = vocab
        self.topology = {"kind": self.KIND, "feature_dim": feature_dim,
                         "num_layers": num_layers, "cell_dim": cell_dim,
                         "proj_dim": proj_dim}

    @classmethod
    def init_from_a2p(cls, a2p: A2PModel, vocab: WordVocab,
                      seed: int = 0) -> "DirectA2WModel":
        """Copy the trained phoneme recognizer's LSTM body bit-exactly; the
        word output layer starts at zero."""
        topo = a2p.topology
        model = cls(topo["feature_dim"], vocab, topo["num_layers"],
                    topo["cell_dim"], topo["proj_dim"], seed)
        for mine, theirs in zip(model.stack.parameters(), a2p.stack.parameters()):
            mine.value[...] = theirs.value
        return model

    def posteriors(self, features: np.ndarray) -> PosteriorSeq:
        log_probs, _ = self.forward_batch(np.asarray(features)[:, None, :])
        return PosteriorSeq(log_probs[:, 0, :], self.vocab.blank_id)

    def save(self, path) -> None:
        self._save(path, dict(self.topology, vocab=self.vocab.to_dict()))

    @classmethod
    def load(cls, path) -> "DirectA2WModel":
        params, config, seed = nn.load_checkpoint(path)
        if config.get("kind") != cls.KIND:
            raise ConfigurationError(f"not an {cls.KIND} checkpoint: {path}")
        model = cls(config["feature_dim"], WordVocab.from_dict(config["vocab"]),
                    config["num_layers"], config["cell_dim"],
                    config["proj_dim"], seed)
        model._restore_params(params)
        return model


class P2WS2SModel:
    """Attention encoder-decoder from phoneme distributions to words.

    The encoder is an LSTM stack. Each decoder step applies single-head
    additive attention over the encoder states, queried by the previous
    decoder state: e_t = v . tanh(W_enc h_t + W_state s + b). The recurrent
    update consumes [embedding(previous word); context]; output logits come
    from [state; context].
    """

    KIND = "p2w_s2s"

    def __init__(self, inventory: PhonemeInventory, vocab: WordVocab,
                 enc_layers: int = 2, enc_cell: int = 96, dec_cell: int = 96,
                 embed_dim: int = 48, attn_dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.inventory = inventory
        self.vocab = vocab
        enc_cfg = nn.LstmConfig(input_dim=inventory.size, cell_dim=enc_cell,
                                projection_dim=None, num_layers=enc_layers)
        self.encoder = nn.LstmStack("s2s.enc", enc_cfg, rng)
        enc_out = self.encoder.output_dim
        self.embed = nn.Embedding("s2s.embed", vocab.size, embed_dim, rng)
        self.w_enc = nn.Parameter("s2s.att.Wenc", nn.uniform_init(rng, (enc_out, attn_dim)))
        self.w_state = nn.Parameter("s2s.att.Wstate", nn.uniform_init(rng, (dec_cell, attn_dim)))
        self.b_att = nn.Parameter("s2s.att.b", np.zeros((1, attn_dim)))
        self.v_att = nn.Parameter("s2s.att.v", nn.uniform_init(rng, (attn_dim, 1)))
        self.cell = nn.LstmLayer("s2s.dec", embed_dim + enc_out, dec_cell, None, rng)
        self.out = nn.Dense("s2s.out", dec_cell + enc_out, vocab.size, zero_init=True)
        self.enc_out_dim = enc_out
        self.dec_cell = dec_cell
        self.seed = seed
        self.topology = {"kind": self.KIND, "enc_layers": enc_layers,
                         "enc_cell": enc_cell, "dec_cell": dec_cell,
                         "embed_dim": embed_dim, "attn_dim": attn_dim}

    def parameters(self) -> list[nn.Parameter]:
        return (self.encoder.parameters() + self.embed.parameters()
                + [self.w_enc, self.w_state, self.b_att, self.v_att]
                + self.cell.parameters() + self.out.parameters())

    def set_frozen(self, frozen: bool) -> None:
        for p in self.parameters():
            p.frozen = frozen

    def param_bytes(self) -> bytes:
        return b"".join(p.value.tobytes() for p in self.parameters())

    # -- encoder ----------------------------------------------------------

    def encode_batch(self, x: np.ndarray, mask: Optional[np.ndarray] = None):
        return self.encoder.forward(x, mask)

    def encode(self, rows: np.ndarray):
        hidden, cache = self.encoder.forward(np.asarray(rows)[:, None, :])
        return hidden[:, 0, :], cache

    # -- one decoder step --------------------------------------------------

    def _zero_state(self):
        return (np.zeros((1, self.dec_cell)), np.zeros((1, self.dec_cell)))

    def decode_step(self, hidden: np.ndarray, state, prev_word_id: int):
        """hidden: (T', H_enc). Returns (new_state, attention (T',), word
        log-probs (V,), cache)."""
        if not 0 <= prev_word_id < self.vocab.size:
            raise DataError(f"word id {prev_word_id} outside vocabulary")
        s_prev, c_prev = state if state is not None else self._zero_state()
        emb = self.embed.forward([prev_word_id])                     # (1, E)
        pre = hidden @ self.w_enc.value + s_prev @ self.w_state.value + self.b_att.value
        u = np.tanh(pre)                                             # (T', A)
        scores = (u @ self.v_att.value)[:, 0]                        # (T',)
        shifted = scores - scores.max()
        weights = np.exp(shifted)
        weights /= weights.sum()                                     # (T',)
        context = weights @ hidden                                   # (H_enc,)
        x = np.concatenate([emb[0], context])[None, :]
        s_new, c_new, cell_cache = self.cell.step(x, s_prev, c_prev)
        combined = np.concatenate([s_new[0], context])[None, :]
        logits, dense_cache = self.out.forward(combined)
        log_probs = nn.log_softmax_rows(logits)[0]
        cache = (hidden, s_prev, u, weights, context, prev_word_id,
                 cell_cache, dense_cache, log_probs)
        return (s_new, c_new), weights, log_probs, cache

    def _decode_step_backward(self, d_logp_row: np.ndarray, ds_next: np.ndarray,
                              dc_next: np.ndarray, cache, d_hidden: np.ndarray):
        """Backward of one teacher-forced step. Returns (ds_prev, dc_prev);
        accumulates into parameters and d_hidden."""
        (hidden, s_prev, u, weights, context, prev_word_id,
         cell_cache, dense_cache, log_probs) = cache
        d_logits = nn.log_softmax_backward(d_logp_row[None, :], log_probs[None, :])
        d_combined = self.out.backward(d_logits, dense_cache)
        ds = d_combined[:, :self.dec_cell] + ds_next
        d_context = d_combined[0, self.dec_cell:]
        dx, ds_prev, dc_prev = self.cell.step_backward(ds, dc_next, cell_cache)
        emb_dim = self.embed.table.value.shape[1]
        self.embed.backward(dx[:, :emb_dim], [prev_word_id])
        d_context = d_context + dx[0, emb_dim:]
        # context = weights @ hidden
        d_weights = hidden @ d_context
        d_hidden += np.outer(weights, d_context)
        d_scores = weights * (d_weights - float(weights @ d_weights))
        self.v_att.grad += u.T @ d_scores[:, None]
        du = np.outer(d_scores, self.v_att.value[:, 0])
        dz = du * (1.0 - u ** 2)
        self.w_enc.grad += hidden.T @ dz
        d_hidden += dz @ self.w_enc.value.T
        dz_sum = dz.sum(axis=0, keepdims=True)
        self.w_state.grad += s_prev.T @ dz_sum
        self.b_att.grad += dz_sum
        ds_prev = ds_prev + dz_sum @ self.w_state.value.T
        return ds_prev, dc_prev

    # -- teacher-forced loss ------------------------------------------------

    def teacher_forced_loss(self, hidden: np.ndarray, target_words: Sequence[int]):
        """Cross-entropy of the target word sequence (eos appended), with
        ground-truth previous words as decoder inputs."""
        targets = [int(w) for w in target_words] + [self.vocab.eos_id]
        inputs = [self.vocab.sos_id] + [int(w) for w in target_words]
        state = None
        loss = 0.0
        step_caches = []
        for prev, tgt in zip(inputs, targets):
            state, _, log_probs, cache = self.decode_step(hidden, state, prev)
            loss -= float(log_probs[tgt])
            step_caches.append((cache, tgt))
        return loss, (step_caches, hidden.shape)

    def teacher_forced_backward(self, cache, scale: float = 1.0) -> np.ndarray:
        """Returns the gradient w.r.t. the encoder states."""
        step_caches, hidden_shape = cache
        d_hidden = np.zeros(hidden_shape)
        ds = np.zeros((1, self.dec_cell))
        dc = np.zeros((1, self.dec_cell))
        for step_cache, tgt in reversed(step_caches):
            log_probs = step_cache[-1]
            d_logp = np.zeros_like(log_probs)
            d_logp[tgt] = -scale
            ds, dc = self._decode_step_backward(d_logp, ds, dc, step_cache, d_hidden)
        return d_hidden

    def loss_on_rows(self, rows: np.ndarray, target_words: Sequence[int]):
        """Convenience: encode single utterance rows, teacher-forced loss,
        full backward through the encoder. Returns the loss."""
        hidden, enc_cache = self.encode(rows)
        loss, dec_cache = self.teacher_forced_loss(hidden, target_words)
        d_hidden = self.teacher_forced_backward(dec_cache)
        self.encoder.backward(d_hidden[:, None, :], enc_cache)
        return loss

    # -- beam decode ---------------------------------------------------------

    def beam_decode(self, hidden: np.ndarray, beam_width: int = 5,
                    max_len: int = 32):
        """Standard beam search; hypotheses terminate at eos and every
        hypothesis is closed with the eos probability by ``max_len``.
        Returns (word ids, total log-prob) ranked by log-prob descending."""
        if beam_width < 1 or max_len < 1:
            raise UsageError("beam_width and max_len must be >= 1")
        active = [(0.0, (), None, self.vocab.sos_id)]
        completed: list[tuple[float, tuple]] = []
        n_words = self.vocab.n_words
        while active:
            expansions = []
            for score, words, state, prev in active:
                new_state, _, log_probs, _ = self.decode_step(hidden, state, prev)
                completed.append((score + float(log_probs[self.vocab.eos_id]), words))
                if len(words) < max_len:
                    for w in range(n_words):
                        expansions.append((score + float(log_probs[w]),
                                           words + (w,), new_state, w))
            expansions.sort(key=lambda e: (-e[0], e[1]))
            active = expansions[:beam_width]
            if len(completed) > 4 * beam_width * (max_len + 1):
                completed.sort(key=lambda e: (-e[0], e[1]))
                completed = completed[: beam_width * (max_len + 1)]
        completed.sort(key=lambda e: (-e[0], e[1]))
        return [(list(words), score) for score, words in completed]

    # -- checkpointing --------------------------------------------------------

    def save(self, path) -> None:
        config = dict(self.topology, inventory=self.inventory.to_dict(),
                      vocab=self.vocab.to_dict())
        nn.save_checkpoint(path, self.parameters(), config, self.seed)

    @classmethod
    def load(cls, path) -> "P2WS2SModel":
        params, config, seed = nn.load_checkpoint(path)
        if config.get("kind") != cls.KIND:
            raise ConfigurationError(f"not a {cls.KIND} checkpoint: {path}")
        model = cls(PhonemeInventory.from_dict(config["inventory"]),
                    WordVocab.from_dict(config["vocab"]),
                    config["enc_layers"], config["enc_cell"], config["dec_cell"],
                    config["embed_dim"], config["attn_dim"], seed)
        own = model.parameters()
        if [p.name for p in own] != [p.name for p in params]:
            raise ConfigurationError("checkpoint does not match model topology")
        for mine, theirs in zip(own, params):
            mine.value[...] = theirs.value
            mine.frozen = theirs.frozen
        return model


def load_any_model(path):
    """Open a checkpoint of any kind."""
    _, config, _ = nn.load_checkpoint(path)
    kind = config.get("kind")
    loaders = {A2PModel.KIND: A2PModel, P2WCtcModel.KIND: P2WCtcModel,
               P2WS2SModel.KIND: P2WS2SModel, DirectA2WModel.KIND: DirectA2WModel}
    if kind not in loaders:
        raise ConfigurationError(f"unknown checkpoint kind {kind!r} in {path}")
    return loaders[kind].load(path)


@dataclass
class A2WStack:
    """The composed acoustics-to-word recognizer."""

    a2p: A2PModel
    psd_cfg: PsdConfig
    p2w: object  # P2WCtcModel or P2WS2SModel
    p2w_kind: str

    def __post_init__(self):
        if self.p2w_kind not in ("ctc", "s2s"):
            raise ConfigurationError("p2w_kind must be 'ctc' or 's2s'")
        p2w_in = (self.p2w.input_dim if isinstance(self.p2w, P2WCtcModel)
                  else self.p2w.inventory.size)
        if p2w_in != self.a2p.inventory.size:
            raise ConfigurationError(
                "word model input dim does not match the phoneme inventory")


@dataclass
class StackResult:
    words: list[int]
    score: float
    phoneme_post: PosteriorSeq
    compact: CompactPosteriorSeq
    compression_ratio: float


def compact_to_rows(compact: CompactPosteriorSeq, hard_input: bool) -> np.ndarray:
    """Turn a compacted posterior sequence into word-model input rows:
    raw probability rows, or one-hot argmax rows when hard_input is set."""
    if hard_input:
        ids = np.argmax(compact.log_probs, axis=1)
        return one_hot_rows(ids, compact.log_probs.shape[1])
    return compact.as_distributions()


def stack_forward(features: np.ndarray, stack: A2WStack, beam_width: int = 5,
                  max_len: int = 32, hard_input: bool = False) -> StackResult:
    """Run the full pipeline on one utterance: phoneme posteriors, blank
    subsampling, then word decoding (greedy for the CTC word model, beam
    search for the attention model)."""
    from . import ctc as ctc_mod

    post = stack.a2p.posteriors(features)
    compact = psd_filter(post, stack.psd_cfg)
    ratio = compact.num_frames / max(post.num_frames, 1)
    rows = compact_to_rows(compact, hard_input)
    if stack.p2w_kind == "ctc":
        word_post = stack.p2w.posteriors(rows)
        words = ctc_mod.greedy_decode(word_post)
        score = ctc_mod.greedy_path_score(word_post)
    else:
        hidden, _ = stack.p2w.encode(rows)
        hyps = stack.p2w.beam_decode(hidden, beam_width=beam_width, max_len=max_len)
        words, score = hyps[0]
    return StackResult(words, score, post, compact, ratio)
