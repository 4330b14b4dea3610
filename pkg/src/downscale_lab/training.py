"""Training loop, evaluation and the six-cell loss x preprocessing matrix."""

from __future__ import annotations

import csv
import io
import logging
import time
from pathlib import Path
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, SamplePair
from .losses import LOSSES, MetricsReport, evaluate_metrics
from .model import CheckpointFormatError, Model, UNetConfig, build_unet, load_checkpoint, paper_config, save_checkpoint
from .optim import Adam, DivergenceError
from .preprocessing import (
    GammaTransform,
    LinearNormalizer,
    fit_normalizer,
    gamma_forward,
    gamma_forward_array,
    gamma_inverse_array,
    normalize,
    normalize_array,
    denormalize_array,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

PREPROC_MODES = ("none", "fixed_2.2", "learnable")
MATRIX_ORDER = (
    ("L1", "none"),
    ("L2", "none"),
    ("L1", "fixed_2.2"),
    ("L1", "learnable"),
    ("L2", "fixed_2.2"),
    ("L2", "learnable"),
)
PLACEMENTS = ("input_and_target", "input_only")


def method_label(loss: str, preproc: str) -> str:
    return {"none": loss, "fixed_2.2": f"{loss}+NL2.2", "learnable": f"{loss}+Learn"}[preproc]


MATRIX_LABELS = tuple(method_label(l, p) for l, p in MATRIX_ORDER)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    base_width: int = 32
    scale_preset: str = "desk"
    fixed_gamma: float = 2.2
    gamma_init: float = 1.0
    placement: str = "input_and_target"
    # learnable mode: refit normalizers at the current gamma before each epoch
    refit_normalizers: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if self.scale_preset not in ("desk", "paper"):
            raise ValueError("scale_preset must be 'desk' or 'paper'")


PAPER_TRAIN = TrainConfig(epochs=800, scale_preset="paper")


@dataclass(frozen=True)
class ExperimentSpec:
    loss: str = "L2"
    preproc: str = "none"
    variable: str = "precipitation_like"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {tuple(LOSSES)}, got {self.loss!r}")
        if self.preproc not in PREPROC_MODES:
            raise ValueError(f"preproc must be one of {PREPROC_MODES}, got {self.preproc!r}")

    @property
    def label(self) -> str:
        return method_label(self.loss, self.preproc)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_abs: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    gamma: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)

    def deterministic_part(self) -> dict:
        d = asdict(self)
        d.pop("epoch_seconds")
        return d


class Preprocessor:
    """Gamma transform plus linear normalizers for inputs and target.

    The gamma transform touches input channel 0 (the predictand) and, with
    placement ``input_and_target``, the target as well. Normalizers are
    fitted on gamma-transformed training data. In learnable mode the trainer
    refits them at the current gamma between epochs.
    """

    def __init__(self, transform: GammaTransform, placement: str = "input_and_target"):
        self.transform = transform
        self.placement = placement
        self.input_norm: LinearNormalizer | None = None
        self.target_norm: LinearNormalizer | None = None

    @property
    def gamma(self) -> float:
        return self.transform.gamma

    @property
    def on_target(self) -> bool:
        return self.placement == "input_and_target"

    def parameters(self) -> list[Tensor]:
        return self.transform.parameters()

    def _gamma_input(self, x: np.ndarray) -> np.ndarray:
        if self.transform.mode == "none":
            return x
        x = x.copy()
        x[:, 0] = gamma_forward_array(x[:, 0], self.gamma)
        return x

    def _gamma_target(self, y: np.ndarray) -> np.ndarray:
        if self.transform.mode == "none" or not self.on_target:
            return y
        return gamma_forward_array(y, self.gamma)

    def fit(self, pairs: Sequence[SamplePair]) -> "Preprocessor":
        xs = np.stack([p.input for p in pairs])
        ys = np.stack([p.target for p in pairs])
        self.input_norm = fit_normalizer([self._gamma_input(xs)])
        self.target_norm = fit_normalizer([self._gamma_target(ys)])
        return self

    def arrays(self, pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
        """Normalized network input and target arrays at the current gamma."""
        xs = np.stack([p.input for p in pairs])
        ys = np.stack([p.target for p in pairs])
        return (
            normalize_array(self._gamma_input(xs), self.input_norm),
            normalize_array(self._gamma_target(ys), self.target_norm),
        )

    def tensors(self, xs: np.ndarray, ys: np.ndarray) -> tuple[Tensor, Tensor]:
        """Raw arrays to normalized tensors, recording gamma on the tape."""
        x = gamma_forward(Tensor(xs), self.transform)
        y = Tensor(ys)
        if self.on_target:
            y = _target_gamma(y, self.transform)
        return normalize(x, self.input_norm), normalize(y, self.target_norm)

    def to_transformed(self, pred_norm: np.ndarray) -> np.ndarray:
        return denormalize_array(pred_norm, self.target_norm)

    def to_physical(self, pred_norm: np.ndarray) -> np.ndarray:
        z = self.to_transformed(pred_norm)
        if self.transform.mode == "none" or not self.on_target:
            return z
        return gamma_inverse_array(z, self.gamma)

    def state(self) -> dict[str, np.ndarray]:
        return {
            "gamma_theta": np.asarray(self.transform.theta.data).copy(),
            "input_mean": self.input_norm.mean.copy(),
            "input_std": self.input_norm.std.copy(),
            "target_mean": self.target_norm.mean.copy(),
            "target_std": self.target_norm.std.copy(),
        }

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.transform.theta.data[...] = state["gamma_theta"]
        self.input_norm = LinearNormalizer(state["input_mean"], state["input_std"])
        self.target_norm = LinearNormalizer(state["target_mean"], state["target_std"])


def _target_gamma(y: Tensor, t: GammaTransform) -> Tensor:
    # targets are single-channel: transform the whole tensor
    if t.mode == "none":
        return y
    return T.signed_pow(y, t.exponent())


def make_transform(spec: ExperimentSpec) -> GammaTransform:
    if spec.preproc == "none":
        return GammaTransform("none")
    if spec.preproc == "fixed_2.2":
        return GammaTransform.fixed(spec.train.fixed_gamma)
    return GammaTransform.learnable(spec.train.gamma_init)


def unet_config(spec: ExperimentSpec, in_channels: int) -> UNetConfig:
    if spec.train.scale_preset == "paper":
        return paper_config(in_channels)
    return UNetConfig(in_channels=in_channels, base_width=spec.train.base_width)


@dataclass
class TrainResult:
    model: Model
    preprocessor: Preprocessor
    history: TrainHistory

    @property
    def transform(self) -> GammaTransform:
        return self.preprocessor.transform


def predict(model: Model, pre: Preprocessor, pairs: Sequence[SamplePair], chunk: int = 16):
    """Eval-mode predictions: (normalized, transformed, physical) arrays."""
    x, _ = pre.arrays(pairs)
    outs = [model.forward(Tensor(x[i : i + chunk]), "eval").data for i in range(0, len(x), chunk)]
    norm = np.concatenate(outs)
    return norm, pre.to_transformed(norm), pre.to_physical(norm)


def evaluate(model: Model, pre: Preprocessor, pairs: Sequence[SamplePair]) -> MetricsReport:
    """Metrics in physical units plus the pre-inverse (transformed) variants."""
    if not pairs:
        return evaluate_metrics([], [])
    _, pred_t, pred_p = predict(model, pre, pairs)
    gt = np.stack([p.target for p in pairs])
    gt_t = pre._gamma_target(gt)
    return evaluate_metrics(pred_p, gt, pred_t, gt_t)


def train(spec: ExperimentSpec, dataset: Dataset, progress=None) -> TrainResult:
    """Train one cell. Deterministic given ``spec.train.seed`` and the data."""
    if dataset.spec.variable != spec.variable:
        raise ValueError(f"dataset holds {dataset.spec.variable} but experiment expects {spec.variable}")
    cfg = spec.train
    pre = Preprocessor(make_transform(spec), cfg.placement).fit(dataset.train)
    model = build_unet(unet_config(spec, dataset.train[0].input.shape[0]), seed=cfg.seed)
    params = model.parameters() + pre.parameters()
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    loss_fn = LOSSES[spec.loss]
    learnable = pre.transform.mode == "learnable"

    raw_x = np.stack([p.input for p in dataset.train])
    raw_y = np.stack([p.target for p in dataset.train])
    if not learnable:
        norm_x, norm_y = pre.arrays(dataset.train)

    select_key = "avg_abs_diff" if spec.loss == "L1" else "avg_mse"
    best_score = np.inf
    best_state = None
    hist = TrainHistory()
    n = len(dataset.train)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if learnable and cfg.refit_normalizers and epoch > 0:
            pre.fit(dataset.train)
        order = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7, epoch))).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) * raw_x.shape[2] * raw_x.shape[3] // 64 < 2:
                continue  # batch too small for train-mode batch norm at the bottleneck
            if learnable:
                x, y = pre.tensors(raw_x[idx], raw_y[idx])
            else:
                x, y = Tensor(norm_x[idx]), Tensor(norm_y[idx])
            loss = loss_fn(model.forward(x, "train"), y)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"{spec.label}: loss became {loss.item()} in epoch {epoch + 1}", epoch + 1)
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except DivergenceError as err:
                raise DivergenceError(f"{spec.label}: {err} in epoch {epoch + 1}", epoch + 1) from err
            if learnable and not 1e-12 < pre.gamma < 1e12:
                raise DivergenceError(f"{spec.label}: gamma left the usable range ({pre.gamma:.3g}) in epoch {epoch + 1}", epoch + 1)
            total += loss.item() * len(idx)
        val = evaluate(model, pre, dataset.val)
        hist.train_loss.append(total / n)
        hist.val_abs.append(val.avg_abs_diff)
        hist.val_mse.append(val.avg_mse)
        hist.gamma.append(pre.gamma)
        hist.epoch_seconds.append(time.perf_counter() - t0)
        score = getattr(val, select_key)
        if score < best_score:
            best_score = score
            best_state = (model.state(), pre.state())
            hist.best_epoch = epoch
        log.info(
            "%s seed=%d epoch %d/%d loss=%.6g val_abs=%.6g val_mse=%.6g gamma=%.4f (%.1fs)",
            spec.label, cfg.seed, epoch + 1, cfg.epochs, hist.train_loss[-1], val.avg_abs_diff,
            val.avg_mse, pre.gamma, hist.epoch_seconds[-1],
        )
        if progress is not None:
            progress(epoch, hist)
    if best_state is not None:
        model.load_state(best_state[0])
        pre.load_state(best_state[1])
    return TrainResult(model, pre, hist)


# -- results table ---------------------------------------------------------

RESULT_COLUMNS = (
    "method",
    "avg_abs_diff",
    "avg_mse",
    "avg_abs_diff_transformed",
    "avg_mse_transformed",
    "gamma_final",
    "seed",
    "status",
    "optimizer",
    "lr",
    "batch_size",
    "epochs",
    "placement",
)


@dataclass
class ResultRow:
    method: str
    seed: int
    metrics: MetricsReport | None
    gamma_final: float
    status: str = "ok"
    train: TrainConfig = field(default_factory=TrainConfig)

    def values(self) -> dict:
        m = self.metrics
        nan = float("nan")
        return {
            "method": self.method,
            "avg_abs_diff": m.avg_abs_diff if m else nan,
            "avg_mse": m.avg_mse if m else nan,
            "avg_abs_diff_transformed": m.avg_abs_diff_transformed if m else nan,
            "avg_mse_transformed": m.avg_mse_transformed if m else nan,
            "gamma_final": self.gamma_final,
            "seed": self.seed,
            "status": self.status,
            "optimizer": f"adam(b1={self.train.beta1},b2={self.train.beta2},eps={self.train.eps})",
            "lr": self.train.lr,
            "batch_size": self.train.batch_size,
            "epochs": self.train.epochs,
            "placement": self.train.placement,
        }


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ResultsTable:
    variable: str
    rows: list[ResultRow] = field(default_factory=list)
    previews: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    @property
    def failed(self) -> list[ResultRow]:
        return [r for r in self.rows if r.status != "ok"]

    def metric(self, method: str, key: str) -> list[float]:
        return [r.values()[key] for r in self.rows if r.method == method and r.status == "ok"]

    def mean(self, method: str, key: str) -> float:
        vals = self.metric(method, key)
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in self.rows:
            v = r.values()
            w.writerow([_fmt(v[c]) for c in RESULT_COLUMNS])
        return buf.getvalue()

    def to_text(self) -> str:
        """Aligned summary in matrix row order: mean (and std across seeds)."""
        seeds = sorted({r.seed for r in self.rows})
        header = ["Method", "avg ABS diff.", "avg MSE", "avg ABS (tr.)", "avg MSE (tr.)", "gamma"]
        body = []
        for method in self.methods:
            rows = [r for r in self.rows if r.method == method]
            if any(r.status != "ok" for r in rows):
                body.append([method, "FAILED", "", "", "", ""])
                continue
            cells = [method]
            for key in ("avg_abs_diff", "avg_mse", "avg_abs_diff_transformed", "avg_mse_transformed", "gamma_final"):
                vals = np.array(self.metric(method, key))
                if len(vals) > 1:
                    cells.append(f"{vals.mean():.6g} ± {vals.std(ddof=1):.2g}")
                else:
                    cells.append(f"{vals[0]:.6g}")
            body.append(cells)
        widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
        out = [f"{self.variable}  (seeds: {', '.join(map(str, seeds))})"]
        out.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        out.append("  ".join("-" * w for w in widths))
        for row in body:
            out.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
        return "\n".join(out) + "\n"

    @classmethod
    def from_csv(cls, text: str, variable: str = "") -> "ResultsTable":
        table = cls(variable)
        for rec in csv.DictReader(io.StringIO(text)):
            ok = rec["status"] == "ok"
            metrics = (
                MetricsReport(
                    float(rec["avg_abs_diff"]),
                    float(rec["avg_mse"]),
                    float(rec["avg_abs_diff_transformed"]),
                    float(rec["avg_mse_transformed"]),
                    0,
                )
                if ok
                else None
            )
            betas = dict(kv.split("=") for kv in rec["optimizer"][5:-1].split(","))
            cfg = TrainConfig(
                beta1=float(betas["b1"]),
                beta2=float(betas["b2"]),
                eps=float(betas["eps"]),
                lr=float(rec["lr"]),
                batch_size=int(rec["batch_size"]),
                epochs=int(rec["epochs"]),
                placement=rec["placement"],
            )
            table.rows.append(
                ResultRow(rec["method"], int(rec["seed"]), metrics, float(rec["gamma_final"]), rec["status"], cfg)
            )
        return table


def run_cell(spec: ExperimentSpec, dataset: Dataset) -> tuple[ResultRow, TrainResult | None]:
    try:
        result = train(spec, dataset)
    except (DivergenceError, FloatingPointError) as err:
        log.error("cell %s seed %d failed: %s", spec.label, spec.train.seed, err)
        return ResultRow(spec.label, spec.train.seed, None, float("nan"), "failed", spec.train), None
    report = evaluate(result.model, result.preprocessor, dataset.test)
    return ResultRow(spec.label, spec.train.seed, report, result.preprocessor.gamma, "ok", spec.train), result


def matrix_specs(variable: str, base: TrainConfig, seeds: Sequence[int]) -> list[ExperimentSpec]:
    return [
        ExperimentSpec(loss, preproc, variable, replace(base, seed=s))
        for s in seeds
        for loss, preproc in MATRIX_ORDER
    ]


def history_csv(hist: TrainHistory) -> str:
    lines = ["epoch,train_loss,val_abs_diff,val_mse,gamma,seconds"]
    for i in range(len(hist)):
        vals = (hist.train_loss[i], hist.val_abs[i], hist.val_mse[i], hist.gamma[i], hist.epoch_seconds[i])
        lines.append(",".join([str(i + 1)] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


def save_run(out_dir, spec: ExperimentSpec, data_spec, result: TrainResult, row: ResultRow) -> Path:
    """Write checkpoint, history and a one-row metrics table into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "experiment": {"loss": spec.loss, "preproc": spec.preproc, "variable": spec.variable},
        "train": asdict(spec.train),
        "data": asdict(data_spec),
        "best_epoch": result.history.best_epoch,
    }
    save_checkpoint(out / "model.ckpt", result.model, result.preprocessor.state(), meta)
    (out / "history.csv").write_text(history_csv(result.history))
    (out / "metrics.csv").write_text(ResultsTable(spec.variable, [row]).to_csv())
    return out


def load_run(checkpoint) -> tuple[Model, Preprocessor, ExperimentSpec, dict]:
    """Inverse of :func:`save_run` for the checkpoint part.

    Returns the model, a ready preprocessor, the experiment spec and the
    dataset-spec dictionary echoed in the checkpoint.
    """
    model, extra, meta = load_checkpoint(checkpoint)
    try:
        exp = meta["experiment"]
        train_cfg = TrainConfig(**meta["train"])
        spec = ExperimentSpec(exp["loss"], exp["preproc"], exp["variable"], train_cfg)
    except (KeyError, TypeError) as err:
        raise CheckpointFormatError(f"checkpoint {checkpoint} lacks experiment metadata: {err}") from err
    pre = Preprocessor(make_transform(spec), train_cfg.placement)
    pre.load_state(extra)
    return model, pre, spec, meta.get("data", {})


def _run_cell_job(args):
    spec, dataset, out_dir = args
    row, result = run_cell(spec, dataset)
    preview = None
    if result is not None:
        preview = predict(result.model, result.preprocessor, dataset.test[:1])[2][0, 0]
        if out_dir is not None:
            save_run(Path(out_dir) / cell_dirname(spec), spec, dataset.spec, result, row)
    return row, preview


def cell_dirname(spec: ExperimentSpec) -> str:
    return f"{spec.label.replace('+', '_').replace('.', '')}_seed{spec.train.seed}"


def run_matrix(
    dataset: Dataset,
    base: TrainConfig = TrainConfig(),
    seeds: Sequence[int] = (0,),
    jobs: int = 1,
    on_cell=None,
    out_dir=None,
) -> ResultsTable:
    """Train all six cells for every seed on shared data.

    Rows come out grouped by method in the fixed matrix order, seeds
    ascending inside each method, regardless of completion order. With
    ``out_dir`` each cell writes its artifacts to its own subdirectory.
    The physical prediction for the first test sample of every successful
    cell is kept in ``table.previews``.
    """
    specs = matrix_specs(dataset.spec.variable, base, seeds)
    jobs_args = [(s, dataset, out_dir) for s in specs]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_run_cell_job, jobs_args))
        if on_cell is not None:
            for s, (row, _) in zip(specs, outs):
                on_cell(s, row)
    else:
        outs = []
        for a in jobs_args:
            outs.append(_run_cell_job(a))
            if on_cell is not None:
                on_cell(a[0], outs[-1][0])
    order = {label: i for i, label in enumerate(MATRIX_LABELS)}
    pairs = sorted(outs, key=lambda o: (order[o[0].method], o[0].seed))
    table = ResultsTable(dataset.spec.variable, [r for r, _ in pairs])
    table.previews = {(r.method, r.seed): p for r, p in pairs if p is not None}
    return table
