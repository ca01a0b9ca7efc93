"""Staged training and evaluation.

Stages: CTC-train the acoustic phoneme model, train the word model from
text only, fine-tune the stacked composite with the acoustic data while the
phoneme model stays frozen, and train the monolithic word-CTC baseline.
Metrics are PER/WER (edit distance over reference length) plus training
throughput in acoustic frames per second.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ctc, nn
from .corpus import Utterance
from .errors import InfeasibleAlignmentError, TrainingError, UsageError
from .models import (A2PModel, A2WStack, DirectA2WModel, P2WCtcModel,
                     P2WS2SModel, PhonemeInventory, WordVocab,
                     compact_to_rows, one_hot_rows, stack_forward)
from .psd import PsdConfig, psd_filter


@dataclass
class TrainConfig:
    """Per-stage training configuration."""

    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0
    early_stop_patience: int = 5
    psd_cfg: PsdConfig = field(default_factory=PsdConfig)
    p2w_kind: str = "ctc"
    hard_input: bool = False
    freeze_a2p: bool = True
    use_wb: bool = True
    frame_budget: int = 2048
    beam_width: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.frame_budget < 1:
            raise UsageError("epochs, batch_size and frame_budget must be >= 1")
        if self.lr <= 0:
            raise UsageError("lr must be > 0")
        if self.p2w_kind not in ("ctc", "s2s"):
            raise UsageError("p2w_kind must be 'ctc' or 's2s'")


@dataclass
class MetricsRecord:
    stage: str
    epoch: int
    train_loss: float
    dev_per: Optional[float] = None
    dev_wer: Optional[float] = None
    frames_per_second: Optional[float] = None
    compression_ratio: Optional[float] = None
    wall_time: float = 0.0

    CSV_HEADER = "stage,epoch,train_loss,dev_per,dev_wer,frames_per_second,compression_ratio,wall_time"

    def to_csv_row(self) -> str:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return ",".join([self.stage, str(self.epoch), fmt(self.train_loss),
                         fmt(self.dev_per), fmt(self.dev_wer),
                         fmt(self.frames_per_second), fmt(self.compression_ratio),
                         fmt(self.wall_time)])


def write_metrics_csv(path, records: Sequence[MetricsRecord],
                      config_echo: Optional[dict] = None) -> None:
    lines = []
    if config_echo:
        echo = " ".join(f"{k}={v}" for k, v in sorted(config_echo.items()))
        lines.append(f"# config: {echo}")
    lines.append(MetricsRecord.CSV_HEADER)
    lines.extend(r.to_csv_row() for r in records)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Minimal insert/delete/substitute count (standard quadratic DP)."""
    if len(a) < len(b):
        a, b = b, a
    prev = np.arange(len(b) + 1)
    for i, xa in enumerate(a, start=1):
        cur = np.empty(len(b) + 1, dtype=np.int64)
        cur[0] = i
        for j, xb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (xa != xb))
        prev = cur
    return int(prev[-1])


def strip_wb(phonemes: Sequence[int], wb_id: int) -> list[int]:
    return [p for p in phonemes if p != wb_id]


def phoneme_targets(utt: Utterance, inventory: PhonemeInventory, use_wb: bool) -> list[int]:
    return list(utt.phonemes) if use_wb else strip_wb(utt.phonemes, inventory.wb_id)


def _make_batches(lengths: Sequence[int], batch_size: int,
                  rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, then sort within coarse blocks by length so batches pad
    little; finally shuffle the batch order. Deterministic under the rng."""
    order = list(rng.permutation(len(lengths)))
    block = batch_size * 4
    batches: list[list[int]] = []
    for start in range(0, len(order), block):
        chunk = sorted(order[start:start + block], key=lambda i: -lengths[i])
        for b in range(0, len(chunk), batch_size):
            batches.append(chunk[b:b + batch_size])
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def _make_frame_budget_batches(lengths: Sequence[int], budget: int,
                               rng: np.random.Generator) -> list[list[int]]:
    """Greedy packing under a total-frames-per-batch budget: the proxy for
    'sequences per device at a fixed memory budget'. Shorter sequences fit
    more per step."""
    order = list(rng.permutation(len(lengths)))
    batches: list[list[int]] = []
    current: list[int] = []
    used = 0
    for i in order:
        need = max(int(lengths[i]), 1)
        if current and used + need > budget:
            batches.append(current)
            current, used = [], 0
        current.append(i)
        used += need
    if current:
        batches.append(current)
    return batches


def _ctc_batch_step(model, inputs: list[np.ndarray], targets: list[list[int]],
                    blank_id: int, opt) -> tuple[float, int, int]:
    """One optimizer step of CTC training on a packed batch.

    Returns (summed loss, utterances used, utterances skipped)."""
    packed, lengths = nn.pack_sequences(inputs)
    mask = nn.lengths_to_mask(lengths, packed.shape[0])
    log_probs, cache = model.forward_batch(packed, mask)
    grad = np.zeros_like(log_probs)
    total, used, skipped = 0.0, 0, 0
    for b, labels in enumerate(targets):
        rows = log_probs[: lengths[b], b, :]
        try:
            loss_b, grad_b = ctc.ctc_loss(ctc.PosteriorSeq(rows, blank_id), labels)
        except InfeasibleAlignmentError:
            skipped += 1
            continue
        grad[: lengths[b], b, :] = grad_b
        total += loss_b
        used += 1
    if used:
        model.backward_batch(grad / used, cache)
        opt.step()
    else:
        for p in model.parameters():
            p.zero_grad()
    return total, used, skipped


def _greedy_ctc_hyps(model, inputs: list[np.ndarray], blank_id: int) -> list[list[int]]:
    packed, lengths = nn.pack_sequences(inputs)
    mask = nn.lengths_to_mask(lengths, packed.shape[0])
    log_probs, _ = model.forward_batch(packed, mask)
    return [ctc.greedy_decode(ctc.PosteriorSeq(log_probs[: lengths[b], b, :], blank_id))
            for b in range(len(inputs))]


def _error_rate(refs: list[list[int]], hyps: list[list[int]]):
    total_dist = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    total_len = sum(len(r) for r in refs)
    return total_dist / max(total_len, 1)


class _BestTracker:
    """Keeps the parameter snapshot with the best (lowest) dev metric."""

    def __init__(self, params: list[nn.Parameter]):
        self.params = params
        self.best_metric = float("inf")
        self.best_epoch = -1
        self._snapshot = None

    def update(self, metric: float, epoch: int) -> bool:
        if metric < self.best_metric:
            self.best_metric = metric
            self.best_epoch = epoch
            self._snapshot = [p.value.copy() for p in self.params]
            return True
        return False

    def restore(self) -> None:
        if self._snapshot is not None:
            for p, v in zip(self.params, self._snapshot):
                p.value[...] = v


def _chunks(seq, size):
    for k in range(0, len(seq), size):
        yield seq[k:k + size]


def evaluate(target, utts: Sequence[Utterance], unit: str, use_wb: bool = True,
             beam_width: int = 5, hard_input: bool = False,
             batch_size: int = 64):
    """Error rate of a model or stack on an evaluation set.

    unit='phoneme' expects an acoustic phoneme recognizer; unit='word'
    accepts a stacked recognizer, a monolithic word recognizer, or a word
    model evaluated on text input. Returns (error_rate, alignments) where
    alignments are (utt_id, reference, hypothesis, distance) tuples.
    """
    if not utts:
        raise UsageError("evaluation set is empty")
    refs: list[list[int]] = []
    hyps: list[list[int]] = []
    ids = [u.utt_id for u in utts]

    if unit == "phoneme":
        if not isinstance(target, A2PModel):
            raise UsageError("phoneme evaluation needs an acoustics-to-phoneme model")
        inv = target.inventory
        for chunk in _chunks(list(utts), batch_size):
            inputs = [u.features for u in chunk]
            hyps.extend(_greedy_ctc_hyps(target, inputs, inv.blank_id))
            refs.extend(phoneme_targets(u, inv, use_wb) for u in chunk)
    elif unit == "word":
        if isinstance(target, A2WStack):
            max_len = 2 * max(len(u.words) for u in utts)
            for u in utts:
                result = stack_forward(u.features, target, beam_width=beam_width,
                                       max_len=max_len, hard_input=hard_input)
                hyps.append(result.words)
                refs.append(list(u.words))
        elif isinstance(target, DirectA2WModel):
            for chunk in _chunks(list(utts), batch_size):
                inputs = [u.features for u in chunk]
                hyps.extend(_greedy_ctc_hyps(target, inputs, target.vocab.blank_id))
                refs.extend(list(u.words) for u in chunk)
        elif isinstance(target, P2WCtcModel):
            inv = target.inventory
            for chunk in _chunks(list(utts), batch_size):
                inputs = [one_hot_rows(phoneme_targets(u, inv, use_wb), inv.size)
                          for u in chunk]
                hyps.extend(_greedy_ctc_hyps(target, inputs, target.vocab.blank_id))
                refs.extend(list(u.words) for u in chunk)
        elif isinstance(target, P2WS2SModel):
            inv = target.inventory
            max_len = 2 * max(len(u.words) for u in utts)
            for u in utts:
                rows = one_hot_rows(phoneme_targets(u, inv, use_wb), inv.size)
                hidden, _ = target.encode(rows)
                words, _ = target.beam_decode(hidden, beam_width=beam_width,
                                              max_len=max_len)[0]
                hyps.append(words)
                refs.append(list(u.words))
        else:
            raise UsageError(f"cannot evaluate {type(target).__name__} at word level")
    else:
        raise UsageError("unit must be 'phoneme' or 'word'")

    alignments = [(i, r, h, edit_distance(r, h)) for i, r, h in zip(ids, refs, hyps)]
    return _error_rate(refs, hyps), alignments


def train_a2p(train: Sequence[Utterance], dev: Sequence[Utterance],
              inventory: PhonemeInventory, cfg: TrainConfig,
              num_layers: int = 3, cell_dim: int = 128,
              proj_dim: Optional[int] = 64,
              log: Optional[Callable[[str], None]] = None):
    """CTC-train the acoustic phoneme recognizer; keeps the best-dev-PER
    parameters. Returns (model, metrics)."""
    if not train:
        raise TrainingError("acoustic training set is empty")
    feature_dim = train[0].features.shape[1]
    model = A2PModel(feature_dim, inventory, num_layers, cell_dim, proj_dim,
                     seed=cfg.seed)
    metrics = _train_ctc_recognizer(
        model, "a2p", cfg,
        inputs=lambda u: u.features,
        targets=lambda u: phoneme_targets(u, inventory, cfg.use_wb),
        blank_id=inventory.blank_id,
        train=train,
        dev_metric=lambda: evaluate(model, dev, "phoneme", use_wb=cfg.use_wb)[0],
        dev_metric_name="per", log=log)
    return model, metrics


def train_p2w(text_train: Sequence[Utterance], text_dev: Sequence[Utterance],
              inventory: PhonemeInventory, vocab: WordVocab, cfg: TrainConfig,
              num_layers: int = 2, cell_dim: int = 96,
              enc_layers: int = 2, enc_cell: int = 96, dec_cell: int = 96,
              embed_dim: int = 48, attn_dim: int = 64,
              log: Optional[Callable[[str], None]] = None):
    """Text-only training of the word model (CTC or attention kind). Inputs
    are exact one-hot phoneme rows, with or without the boundary marker."""
    if not text_train:
        raise TrainingError("text training set is empty")
    stage = f"p2w-{cfg.p2w_kind}"

    def rows_for(u: Utterance) -> np.ndarray:
        return one_hot_rows(phoneme_targets(u, inventory, cfg.use_wb), inventory.size)

    if cfg.p2w_kind == "ctc":
        model = P2WCtcModel(inventory, vocab, num_layers, cell_dim, None,
                            seed=cfg.seed)
        metrics = _train_ctc_recognizer(
            model, stage, cfg,
            inputs=rows_for,
            targets=lambda u: list(u.words),
            blank_id=vocab.blank_id,
            train=text_train,
            dev_metric=lambda: evaluate(model, text_dev, "word", use_wb=cfg.use_wb,
                                        beam_width=cfg.beam_width)[0],
            dev_metric_name="wer", log=log)
        return model, metrics

    model = P2WS2SModel(inventory, vocab, enc_layers, enc_cell, dec_cell,
                        embed_dim, attn_dim, seed=cfg.seed)
    opt = nn.Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 991])
    tracker = _BestTracker(model.parameters())
    metrics: list[MetricsRecord] = []
    stale = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lengths = [len(u.phonemes) for u in text_train]
        total_loss, n_seen = 0.0, 0
        for batch in _make_batches(lengths, cfg.batch_size, rng):
            chunk = [text_train[i] for i in batch]
            inputs = [rows_for(u) for u in chunk]
            packed, lens = nn.pack_sequences(inputs)
            mask = nn.lengths_to_mask(lens, packed.shape[0])
            hidden, enc_cache = model.encode_batch(packed, mask)
            d_hidden = np.zeros_like(hidden)
            for b, u in enumerate(chunk):
                hid = hidden[: lens[b], b, :]
                loss_b, dec_cache = model.teacher_forced_loss(hid, u.words)
                d_hidden[: lens[b], b, :] = model.teacher_forced_backward(
                    dec_cache, scale=1.0 / len(chunk))
                total_loss += loss_b
                n_seen += 1
            model.encoder.backward(d_hidden, enc_cache)
            opt.step()
        dev_wer = evaluate(model, text_dev, "word", use_wb=cfg.use_wb,
                           beam_width=cfg.beam_width)[0]
        wall = time.perf_counter() - t0
        record = MetricsRecord(stage, epoch, total_loss / max(n_seen, 1),
                               dev_wer=dev_wer, wall_time=wall)
        metrics.append(record)
        if log:
            log(f"[{stage}] epoch {epoch}: loss {record.train_loss:.4f} "
                f"dev_wer {dev_wer:.4f}")
        if tracker.update(dev_wer, epoch):
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    tracker.restore()
    return model, metrics


def _train_ctc_recognizer(model, stage: str, cfg: TrainConfig, inputs, targets,
                          blank_id: int, train, dev_metric, dev_metric_name: str,
                          log=None) -> list[MetricsRecord]:
    opt = nn.Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 7])
    tracker = _BestTracker(model.parameters())
    metrics: list[MetricsRecord] = []
    stale = 0
    lengths = [inputs(u).shape[0] for u in train]
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total_loss, n_used, n_skipped, n_frames = 0.0, 0, 0, 0
        for batch in _make_batches(lengths, cfg.batch_size, rng):
            chunk = [train[i] for i in batch]
            ins = [inputs(u) for u in chunk]
            tgts = [targets(u) for u in chunk]
            loss, used, skipped = _ctc_batch_step(model, ins, tgts, blank_id, opt)
            total_loss += loss
            n_used += used
            n_skipped += skipped
            n_frames += sum(x.shape[0] for x in ins)
        if n_used == 0:
            raise TrainingError(f"{stage}: every utterance was skipped as infeasible")
        wall = time.perf_counter() - t0
        dev_value = dev_metric()
        record = MetricsRecord(stage, epoch, total_loss / n_used,
                               frames_per_second=n_frames / max(wall, 1e-9),
                               wall_time=wall)
        if dev_metric_name == "per":
            record.dev_per = dev_value
        else:
            record.dev_wer = dev_value
        metrics.append(record)
        if log:
            log(f"[{stage}] epoch {epoch}: loss {record.train_loss:.4f} "
                f"dev_{dev_metric_name} {dev_value:.4f} skipped {n_skipped}")
        if tracker.update(dev_value, epoch):
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    tracker.restore()
    return metrics


def train_direct_a2w(train: Sequence[Utterance], dev: Sequence[Utterance],
                     a2p_init: A2PModel, vocab: WordVocab, cfg: TrainConfig,
                     log: Optional[Callable[[str], None]] = None):
    """Word-CTC training of the monolithic baseline, lower layers warm-started
    from the trained phoneme recognizer. No text data, no subsampling."""
    if not train:
        raise TrainingError("acoustic training set is empty")
    model = DirectA2WModel.init_from_a2p(a2p_init, vocab, seed=cfg.seed)
    metrics = _train_ctc_recognizer(
        model, "direct-a2w", cfg,
        inputs=lambda u: u.features,
        targets=lambda u: list(u.words),
        blank_id=vocab.blank_id,
        train=train,
        dev_metric=lambda: evaluate(model, dev, "word")[0],
        dev_metric_name="wer", log=log)
    return model, metrics


def _precompute_posteriors(a2p: A2PModel, utts: Sequence[Utterance],
                           batch_size: int = 64) -> list[ctc.PosteriorSeq]:
    out = []
    for chunk in _chunks(list(utts), batch_size):
        packed, lens = nn.pack_sequences([u.features for u in chunk])
        mask = nn.lengths_to_mask(lens, packed.shape[0])
        log_probs, _ = a2p.forward_batch(packed, mask)
        out.extend(ctc.PosteriorSeq(log_probs[: lens[b], b, :].copy(),
                                    a2p.inventory.blank_id)
                   for b in range(len(chunk)))
    return out


def joint_finetune(stack: A2WStack, train: Sequence[Utterance],
                   dev: Sequence[Utterance], cfg: TrainConfig,
                   log: Optional[Callable[[str], None]] = None):
    """Fine-tune the stacked recognizer with the word-level loss.

    With freeze_a2p (the default) the phoneme model's parameters are frozen
    and its posteriors are computed once up front; gradients flow only into
    the word model. Batches are packed under a frame budget, so shorter
    subsampled sequences mean more utterances per optimizer step.
    """
    p2w = stack.p2w
    a2p = stack.a2p
    a2p.set_frozen(cfg.freeze_a2p)
    trainable = p2w.parameters() + ([] if cfg.freeze_a2p else a2p.parameters())
    opt = nn.Adam(trainable, lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 777])
    tracker = _BestTracker(trainable)
    metrics: list[MetricsRecord] = []
    stale = 0

    frozen_train = _precompute_posteriors(a2p, train) if cfg.freeze_a2p else None

    def compact_for(idx: int, post=None):
        post = post if post is not None else frozen_train[idx]
        return psd_filter(post, cfg.psd_cfg)

    compact_lengths = []
    ratios = []
    if cfg.freeze_a2p:
        for i in range(len(train)):
            compact = compact_for(i)
            compact_lengths.append(compact.num_frames)
            ratios.append(compact.num_frames / frozen_train[i].num_frames)
    else:
        compact_lengths = [u.num_frames for u in train]
    mean_ratio = float(np.mean(ratios)) if ratios else None

    def dev_wer() -> float:
        return evaluate(stack, dev, "word", beam_width=cfg.beam_width,
                        hard_input=cfg.hard_input)[0]

    wer0 = dev_wer()
    tracker.update(wer0, -1)
    if log:
        log(f"[joint-{cfg.p2w_kind}] before fine-tune: dev_wer {wer0:.4f}")

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total_loss, n_used, n_skipped, n_frames = 0.0, 0, 0, 0
        epoch_ratios = []
        for batch in _make_frame_budget_batches(compact_lengths, cfg.frame_budget, rng):
            if cfg.freeze_a2p:
                posts = [frozen_train[i] for i in batch]
                a2p_cache = None
                a2p_logp = None
            else:
                packed, lens = nn.pack_sequences([train[i].features for i in batch])
                mask = nn.lengths_to_mask(lens, packed.shape[0])
                a2p_logp, a2p_cache = a2p.forward_batch(packed, mask)
                posts = [ctc.PosteriorSeq(a2p_logp[: lens[b], b, :],
                                          a2p.inventory.blank_id)
                         for b in range(len(batch))]
            compacts = [psd_filter(p, cfg.psd_cfg) for p in posts]
            epoch_ratios.extend(c.num_frames / p.num_frames
                                for c, p in zip(compacts, posts))
            rows_in = [compact_to_rows(c, cfg.hard_input) for c in compacts]
            targets = [list(train[i].words) for i in batch]
            n_frames += sum(train[i].num_frames for i in batch)

            loss, used, skipped, d_rows = _p2w_loss_and_backward(
                p2w, cfg, rows_in, targets)
            total_loss += loss
            n_used += used
            n_skipped += skipped
            if used == 0:
                for p in trainable:
                    p.zero_grad()
                continue
            if not cfg.freeze_a2p and not cfg.hard_input:
                d_logp = np.zeros_like(a2p_logp)
                for b, (compact, dr) in enumerate(zip(compacts, d_rows)):
                    keep = compact.source_indices >= 0
                    src = compact.source_indices[keep]
                    # rows are exp(log-probs); chain through the exponential
                    d_logp[src, b, :] += dr[keep] * np.exp(compact.log_probs[keep])
                a2p.backward_batch(d_logp, a2p_cache)
            opt.step()
        if n_used == 0:
            raise TrainingError("joint stage: every utterance was skipped")
        wall = time.perf_counter() - t0
        wer = dev_wer()
        record = MetricsRecord(f"joint-{cfg.p2w_kind}", epoch,
                               total_loss / n_used, dev_wer=wer,
                               frames_per_second=n_frames / max(wall, 1e-9),
                               compression_ratio=(float(np.mean(epoch_ratios))
                                                  if epoch_ratios else mean_ratio),
                               wall_time=wall)
        metrics.append(record)
        if log:
            log(f"[joint-{cfg.p2w_kind}] epoch {epoch}: loss {record.train_loss:.4f} "
                f"dev_wer {wer:.4f} fr/s {record.frames_per_second:.0f} "
                f"skipped {n_skipped}")
        if tracker.update(wer, epoch):
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    tracker.restore()
    return stack, metrics


def _p2w_loss_and_backward(p2w, cfg: TrainConfig, rows_in: list[np.ndarray],
                           targets: list[list[int]]):
    """Loss and backward through the word model for one joint batch.

    Returns (summed loss, used, skipped, per-utterance input-row gradients).
    Parameter gradients are accumulated already scaled by 1/used."""
    d_rows = [np.zeros_like(r) for r in rows_in]
    if cfg.p2w_kind == "ctc":
        packed, lens = nn.pack_sequences(rows_in)
        mask = nn.lengths_to_mask(lens, packed.shape[0])
        log_probs, cache = p2w.forward_batch(packed, mask)
        grad = np.zeros_like(log_probs)
        total, used, skipped = 0.0, 0, 0
        losses = []
        for b, tgt in enumerate(targets):
            rows = log_probs[: lens[b], b, :]
            try:
                loss_b, grad_b = ctc.ctc_loss(
                    ctc.PosteriorSeq(rows, p2w.vocab.blank_id), tgt)
            except InfeasibleAlignmentError:
                skipped += 1
                continue
            grad[: lens[b], b, :] = grad_b
            total += loss_b
            used += 1
        if used:
            d_packed = p2w.backward_batch(grad / used, cache)
            for b in range(len(rows_in)):
                d_rows[b] = d_packed[: lens[b], b, :]
        return total, used, skipped, d_rows

    # attention kind: encoder batched, decoder per utterance
    packed, lens = nn.pack_sequences(rows_in)
    mask = nn.lengths_to_mask(lens, packed.shape[0])
    hidden, enc_cache = p2w.encode_batch(packed, mask)
    d_hidden = np.zeros_like(hidden)
    total, used = 0.0, 0
    for b, tgt in enumerate(targets):
        hid = hidden[: lens[b], b, :]
        loss_b, dec_cache = p2w.teacher_forced_loss(hid, tgt)
        d_hidden[: lens[b], b, :] = p2w.teacher_forced_backward(
            dec_cache, scale=1.0 / len(targets))
        total += loss_b
        used += 1
    d_packed = p2w.encoder.backward(d_hidden, enc_cache)
    for b in range(len(rows_in)):
        d_rows[b] = d_packed[: lens[b], b, :]
    return total, used, 0, d_rows


def benchmark_throughput(stage_fn: Callable[[], None], total_frames: int,
                         timed_runs: int = 3, warmup_runs: int = 1) -> float:
    """Median acoustic frames per second of ``stage_fn`` (one epoch per
    call). Warm-up runs are excluded."""
    if timed_runs < 1:
        raise UsageError("need at least one timed run")
    for _ in range(warmup_runs):
        stage_fn()
    rates = []
    for _ in range(timed_runs):
        t0 = time.perf_counter()
        stage_fn()
        rates.append(total_frames / max(time.perf_counter() - t0, 1e-9))
    return float(np.median(rates))
