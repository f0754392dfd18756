"""Training costs, AdamW, and the on-the-fly training loop.

The base cost is the mean squared difference between the target log
spectrum and the network output; progressive supervision adds the same
cost at every block's probe output, weighted by alpha and averaged over
blocks (the final block therefore contributes to both terms). Examples
are synthesized on demand: a random utterance is corrupted (reverb +
noise) and a contiguous span of frames is cut from the aligned
noisy-feature / clean-target pair. Everything is deterministic given the
config seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import corpus as corpus_mod
from . import diffcore, frontend, netmodel
from .diffcore import Node
from .frontend import FeatureSequence, LogSpectrogram, Waveform
from .netmodel import ModelParams


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    seq_len: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-5
    steps: int = 1000
    seed: int = 0
    rt60_choices: tuple[float, ...] = (0.25, 0.5, 0.7)
    drr_choices: tuple[float, ...] = (5.0, -5.0)
    snr_db: float = 20.0
    noise_kind: str = "speech-shaped"
    sum_excludes_final: bool = False
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.seq_len < 2:
            raise ValueError(f"sequence length must be >= 2, got {self.seq_len}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch size must be >= 1 and steps >= 0")
        if not self.rt60_choices:
            raise ValueError("at least one rt60 value is required")


@dataclass
class OptimizerState:
    """Per-parameter first/second moments and the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class CostReport:
    total: float
    main: float
    per_block: list[float]


class TrainingDiverged(RuntimeError):
    pass


def mse_cost(target, estimate) -> float:
    """Mean squared elementwise difference of two equal-shape spectrograms."""
    y = target.frames if isinstance(target, LogSpectrogram) else np.asarray(target)
    x = estimate.frames if isinstance(estimate, LogSpectrogram) else np.asarray(estimate)
    if y.shape != x.shape:
        raise ValueError(f"cost: shape mismatch {y.shape} vs {x.shape}")
    d = y - x
    return float(np.mean(d * d))


def progressive_cost(target, probes, alpha: float, exclude_final: bool = False) -> CostReport:
    """Final-block cost plus the alpha-weighted mean of all block costs.

    ``exclude_final`` drops the last block from the auxiliary sum
    (normalizing by L-1) for ablation; by default the sum runs over every
    block, so the final block is counted in both terms.
    """
    outputs = probes.outputs if isinstance(probes, netmodel.ProbeTrace) else list(probes)
    if not outputs:
        raise ValueError("progressive cost needs at least one block output")
    per_block = [mse_cost(target, p) for p in outputs]
    main = per_block[-1]
    if alpha == 0.0:
        return CostReport(main, main, per_block)
    aux_terms = per_block[:-1] if exclude_final else per_block
    aux = alpha * sum(aux_terms) / len(aux_terms) if aux_terms else 0.0
    return CostReport(main + aux, main, per_block)


def cost_graph(
    final: Node, probes: Sequence[Node], target: np.ndarray, alpha: float, exclude_final: bool = False
) -> tuple[Node, CostReport]:
    """Differentiable cost node plus the per-block report for logging.

    With alpha = 0 the graph is exactly the plain final-block cost (no
    probe nodes enter it), so the parameter trajectory is bit-identical to
    a run without progressive supervision.
    """
    main = diffcore.mse(final, target)
    per_block = [mse_cost(target, p.value) for p in probes]
    if alpha == 0.0:
        total = main
    else:
        aux_nodes = [diffcore.mse(p, target) for p in probes]
        if exclude_final:
            aux_nodes = aux_nodes[:-1]
        if aux_nodes:
            aux = diffcore.scale(diffcore.add_scalars(aux_nodes), alpha / len(aux_nodes))
            total = diffcore.add_scalars([main, aux])
        else:
            total = main
    return total, CostReport(float(total.value), float(main.value), per_block)


def adamw_step(params: Sequence[tuple[str, Node]], state: OptimizerState, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update over named parameters.

    Rejects the whole step (no parameter is touched) if any gradient is
    missing or non-finite.
    """
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"adamw_step: parameter {name!r} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise ValueError(f"adamw_step: non-finite gradient in {name!r}")

    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, p in params:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.value -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        if cfg.weight_decay:
            p.value -= (cfg.lr * cfg.weight_decay) * p.value


def sample_example(
    corpus: Sequence[Waveform], cfg: TrainConfig, index: int
) -> tuple[FeatureSequence, LogSpectrogram]:
    """Deterministic (noisy features, clean target) pair for one step index.

    Picks an utterance and corruption draw from (seed, index), corrupts the
    whole clean waveform, and cuts the same contiguous ``seq_len``-frame
    span from the noisy features and the clean log spectrum. Utterances too
    short for the span are skipped with a deterministic redraw.
    """
    if not corpus:
        raise ValueError("empty corpus")
    for attempt in range(4 * len(corpus) + 4):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index, attempt)))
        clean = corpus[int(rng.integers(len(corpus)))]
        rt60 = float(rng.choice(np.asarray(cfg.rt60_choices, dtype=float)))
        distance_drr = float(rng.choice(np.asarray(cfg.drr_choices, dtype=float)))
        rir_seed, noise_seed = (int(s) for s in rng.integers(2**31, size=2))
        spec = corpus_mod.CorruptionSpec(
            rir=corpus_mod.make_rir_spec(rt60, corpus_mod.room_drr(rt60, distance_drr), rir_seed),
            snr_db=cfg.snr_db,
            noise_kind=cfg.noise_kind,
            seed=noise_seed,
        )
        noisy = corpus_mod.corrupt(clean, spec)
        feats, _ = frontend.assemble_features(noisy)
        n_frames = feats.frames.shape[0]
        if n_frames < cfg.seq_len:
            continue
        target = frontend.target_spectrum(clean)
        start = int(rng.integers(n_frames - cfg.seq_len + 1))
        stop = start + cfg.seq_len
        return (
            FeatureSequence(feats.frames[start:stop], feats.norm_scale),
            LogSpectrogram(target.frames[start:stop]),
        )
    raise ValueError(f"no utterance long enough for {cfg.seq_len} frames")


def _batch(corpus, cfg: TrainConfig, step: int, dtype, n_bands: int) -> tuple[np.ndarray, np.ndarray]:
    feats, targets = [], []
    for j in range(cfg.batch_size):
        f, y = sample_example(corpus, cfg, step * cfg.batch_size + j)
        target = y.frames if n_bands == y.frames.shape[1] else frontend.fold_spectrum(y.frames, n_bands)
        feats.append(f.frames.T)
        targets.append(target.T)
    return np.stack(feats).astype(dtype), np.stack(targets).astype(dtype)


def train(
    model: ModelParams,
    corpus: Sequence[Waveform],
    cfg: TrainConfig,
    *,
    log_path=None,
    checkpoint_path=None,
    opt_state: OptimizerState | None = None,
    start_step: int = 0,
    print_every: int = 0,
) -> list[CostReport]:
    """Run AdamW updates of the (progressive) cost; returns per-step reports.

    Writes one CSV row per step to ``log_path`` and refreshes
    ``checkpoint_path`` every ``cfg.checkpoint_interval`` steps and at the
    end (optimizer moments ride along, so a resumed run continues the
    exact trajectory). Divergence aborts with the last checkpoint intact.
    """
    params = netmodel.named_parameters(model)
    state = opt_state if opt_state is not None else OptimizerState()
    netmodel.set_training(model, True)
    dtype = model.first_layer.weight.value.dtype
    n_blocks = model.config.blocks
    reports: list[CostReport] = []

    log_fh = None
    writer = None
    if log_path is not None:
        log_fh = open(log_path, "a" if start_step else "w", newline="")
        writer = csv.writer(log_fh)
        if not start_step:
            writer.writerow(["step", "total", "main"] + [f"per_block_{l}" for l in range(1, n_blocks + 1)])

    def save(step: int) -> None:
        if checkpoint_path is None:
            return
        extra = {f"opt.m.{k}": v for k, v in state.m.items()}
        extra.update({f"opt.v.{k}": v for k, v in state.v.items()})
        extra["opt.t"] = np.array([state.t], dtype=np.float32)
        extra["train.step"] = np.array([step], dtype=np.float32)
        netmodel.save_checkpoint(checkpoint_path, model, extra)

    try:
        for step in range(start_step, cfg.steps):
            x_np, y_np = _batch(corpus, cfg, step, dtype, model.config.channels)
            x = Node(x_np)
            final, probes = netmodel.forward_nodes(model, x, want_probes=True)
            total, report = cost_graph(final, probes, y_np, cfg.alpha, cfg.sum_excludes_final)
            if not math.isfinite(report.total):
                raise TrainingDiverged(f"cost became {report.total} at step {step}")
            diffcore.zero_grads(node for _, node in params)
            diffcore.backprop(total)
            adamw_step(params, state, cfg)
            reports.append(report)
            if writer is not None:
                writer.writerow([step, repr(report.total), repr(report.main)] + [repr(c) for c in report.per_block])
            if print_every and (step + 1) % print_every == 0:
                blocks = " ".join(f"{c:.4f}" for c in report.per_block)
                print(f"step {step + 1}/{cfg.steps} total {report.total:.5f} main {report.main:.5f} blocks [{blocks}]")
            if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                save(step + 1)
        save(cfg.steps)
    finally:
        if log_fh is not None:
            log_fh.close()
    return reports


def resume_state(extra: dict[str, np.ndarray]) -> tuple[OptimizerState, int]:
    """Optimizer state and next step index from checkpoint extras."""
    if "opt.t" not in extra or "train.step" not in extra:
        raise ValueError("checkpoint carries no optimizer state; it cannot be resumed")
    state = OptimizerState(t=int(extra["opt.t"][0]))
    for name, arr in extra.items():
        if name.startswith("opt.m."):
            state.m[name[len("opt.m."):]] = arr.copy()
        elif name.startswith("opt.v."):
            state.v[name[len("opt.v."):]] = arr.copy()
    return state, int(extra["train.step"][0])
