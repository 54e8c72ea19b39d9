"""End-to-end model, training loop and the experiment sweeps built on it."""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from voxfuse.core.functional import relu
from voxfuse.core.nn import Conv3d, Linear, Module, Pointwise3d
from voxfuse.core.optim import AdamW, cosine_lr
from voxfuse.core.tensor import Tensor, matmul, reshape
from voxfuse.daga import DagaConfig
from voxfuse.errors import ContractError, DivergenceError
from voxfuse.fusion import (
    FUSION_STRATEGIES,
    FusionWeights,
    GatingHead,
    WeatherCondition,
    WeatherContext,
    fuse_addition,
    fuse_concat,
    fuse_conv3d,
    fuse_weathfusion,
    fused_channels,
    gate_weights,
    weather_prompt,
)
from voxfuse.metrics import (
    ConfusionMatrix,
    ObjectiveConfig,
    geometric_iou,
    metrics_rows,
    miou,
    total_loss,
)
from voxfuse.scenes import (
    CAMERA_FEATURE_DIM,
    LIDAR_FEATURE_DIM,
    NUM_CLASSES,
    SCENE_CLASSES,
    CorruptionModel,
    Observations,
    apply_corruption,
    generate_scene,
    make_scene_spec,
)
from voxfuse.semantic import (
    DEFAULT_EMBED_DIM,
    GatedCrossAttention,
    LoRAAdapter,
    PromptSpec,
    build_instance_prompt,
    default_encoder,
    encode_text,
    encode_tokens,
)
from voxfuse.voxel import GridSpec, VoxelGrid, lss_splat, splat_index, voxelize

SEMANTIC_NAMES = SCENE_CLASSES[1:]
THREADS_ENV = "VOXFUSE_THREADS"


@dataclass
class ExperimentConfig:
    """Everything that determines a run; ``(config, seed)`` fixes the report byte for byte."""

    seed: int = 0
    grid: GridSpec = field(default_factory=GridSpec)
    instvlm: bool = True
    weathfusion: bool = True
    daga: bool = True
    fusion: str = "weathfusion"
    weather_mix: tuple[str, ...] = ("clear_day", "rain", "night")
    scenes_per_condition: int = 2
    eval_scenes_per_condition: int = 2
    steps: int = 200
    lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 0.01
    batch_size: int = 1
    channels: int = 8
    key_dim: int = 8
    embed_dim: int = DEFAULT_EMBED_DIM
    lora_rank: int = 4
    lambda_daga: float = 0.2
    daga_config: DagaConfig = field(default_factory=DagaConfig)
    corruption: CorruptionModel = field(default_factory=CorruptionModel)
    region: str = "Singapore"
    out_dir: str | None = None

    def __post_init__(self):
        self.weather_mix = tuple(WeatherCondition.parse(w).value for w in self.weather_mix)
        if self.fusion not in FUSION_STRATEGIES:
            raise ContractError(f"fusion must be one of {FUSION_STRATEGIES}, got {self.fusion!r}")
        if self.batch_size != 1:
            raise ContractError("only batch size 1 is supported")
        if self.steps < 1 or self.scenes_per_condition < 1:
            raise ContractError("steps and scenes_per_condition must be >= 1")

    @property
    def effective_fusion(self) -> str:
        """The weather gate falls back to plain concatenation when its toggle is off."""
        if self.fusion == "weathfusion" and not self.weathfusion:
            return "concat"
        return self.fusion

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["daga_config"] = self.daga_config.to_dict()
        d["corruption"] = self.corruption.to_dict()
        d["weather_mix"] = list(self.weather_mix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = GridSpec.from_dict(d["grid"])
        if "daga_config" in d:
            d["daga_config"] = DagaConfig.from_dict(d["daga_config"])
        if "corruption" in d:
            d["corruption"] = CorruptionModel(**d["corruption"])
        if "weather_mix" in d:
            d["weather_mix"] = tuple(d["weather_mix"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(lambda_daga=self.lambda_daga if self.daga else 0.0,
                               daga=self.daga_config)


class OccupancyModel(Module):
    """Branch projections, per-branch text attention, fusion, a small encoder and the head.

    Submodules of disabled components are not built, so ``parameters()`` lists
    exactly the trainable state of the configured pipeline.
    """

    def __init__(self, cfg: ExperimentConfig):
        rng = np.random.default_rng([cfg.seed, 271828])
        c = cfg.channels
        self.cam_proj = Linear(CAMERA_FEATURE_DIM, c, rng=rng, bias=False)
        self.pts_proj = Pointwise3d(LIDAR_FEATURE_DIM, c, rng=rng, bias=False)
        if cfg.instvlm:
            self.lora = LoRAAdapter(cfg.embed_dim, cfg.embed_dim, cfg.lora_rank, rng=rng)
            self.instvlm_cam = GatedCrossAttention(c, cfg.embed_dim, cfg.key_dim, lora=self.lora, rng=rng)
            self.instvlm_pts = GatedCrossAttention(c, cfg.embed_dim, cfg.key_dim, lora=self.lora, rng=rng)
        strategy = cfg.effective_fusion
        if strategy == "weathfusion":
            self.gating = GatingHead(cfg.embed_dim, rng=rng)
        width = fused_channels(strategy, c, c)
        if strategy == "conv3d":
            self.conv = Conv3d(width, width, rng=rng)
        self.neck = Pointwise3d(width, c, rng=rng)
        self.head = Pointwise3d(c, NUM_CLASSES, rng=rng)
        self.strategy = strategy
        self.use_instvlm = cfg.instvlm


@dataclass
class PipelineOutput:
    logits: Tensor
    v_cam: VoxelGrid
    v_pts: VoxelGrid
    weights: FusionWeights | None
    prompt: PromptSpec | None


_SPLAT_CACHE: dict = {}


def _splat_index(obs: Observations) -> np.ndarray:
    cam = obs.camera
    key = (obs.grid.to_dict().__repr__(), cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
           cam.depth_bins.tobytes(), cam.rotation.tobytes(), cam.translation.tobytes())
    if key not in _SPLAT_CACHE:
        _SPLAT_CACHE[key] = splat_index(cam, obs.grid)
    return _SPLAT_CACHE[key]


def training_prompt(obs: Observations) -> PromptSpec:
    """Ground-truth class set of the scene, as used for prompting during training."""
    names = [SCENE_CLASSES[c] for c in sorted(obs.labels.classes_present())]
    return build_instance_prompt(names, obs.weather.region, t=1, all_classes=SEMANTIC_NAMES)


def branch_volumes(obs: Observations, model: OccupancyModel) -> tuple[VoxelGrid, VoxelGrid]:
    grid = obs.grid
    c = model.cam_proj.out_dim
    f, h, w = obs.image_features.shape
    pixels = matmul(model.cam_proj.weight, Tensor(obs.image_features.reshape(f, h * w)))
    v_cam = lss_splat(reshape(pixels, (c, h, w)), Tensor(obs.depth_probs), obs.camera,
                      grid.with_channels(c), index=_splat_index(obs))
    raw = voxelize(obs.points, grid.with_channels(LIDAR_FEATURE_DIM))
    v_pts = VoxelGrid(grid.with_channels(c), model.pts_proj(raw.features))
    return v_cam, v_pts


def forward_pipeline(obs: Observations, cfg: ExperimentConfig, model: OccupancyModel,
                     prompt: PromptSpec | None = None) -> PipelineOutput:
    """LiDAR voxelization and camera splatting, optional text attention, fusion, logits."""
    encoder = default_encoder(cfg.embed_dim)
    v_cam, v_pts = branch_volumes(obs, model)
    if model.use_instvlm:
        prompt = prompt if prompt is not None else training_prompt(obs)
        tokens = encode_tokens(prompt, encoder)
        v_cam = model.instvlm_cam(v_cam, tokens, tokens)
        v_pts = model.instvlm_pts(v_pts, tokens, tokens)

    weights = None
    if model.strategy == "weathfusion":
        p_weath = encode_text(weather_prompt(obs.weather), encoder)
        weights = gate_weights(p_weath, model.gating)
        fused = fuse_weathfusion(v_cam, v_pts, weights)
    elif model.strategy == "addition":
        fused = fuse_addition(v_cam, v_pts)
    elif model.strategy == "concat":
        fused = fuse_concat(v_cam, v_pts)
    else:
        fused = fuse_conv3d(v_cam, v_pts, model.conv)
    hidden = relu(model.neck(fused.features))
    logits = model.head(hidden)
    return PipelineOutput(logits, v_cam, v_pts, weights, prompt if model.use_instvlm else None)


def predict_labels(logits: Tensor) -> np.ndarray:
    return np.argmax(logits.data, axis=0)


def predicted_classes(pred: np.ndarray) -> list[str]:
    present = sorted(int(c) for c in np.unique(pred) if c != 0)
    return [SCENE_CLASSES[c] for c in present]


# -- data ------------------------------------------------------------------------

def _scene_seed(base: int, split: int, condition_index: int, i: int) -> int:
    return int(np.random.default_rng([base, split, condition_index, i]).integers(2**31))


def build_scene_set(cfg: ExperimentConfig, split: str = "train") -> list[Observations]:
    """Corrupted observations for every condition in the weather mix."""
    split_id = {"train": 0, "eval": 1}[split]
    n = cfg.scenes_per_condition if split == "train" else cfg.eval_scenes_per_condition
    out = []
    for ci, condition in enumerate(cfg.weather_mix):
        ctx = WeatherContext(condition, cfg.region)
        for i in range(n):
            seed = _scene_seed(cfg.seed, split_id, ci, i)
            obs = generate_scene(make_scene_spec(seed, ctx, cfg.grid))
            out.append(apply_corruption(obs, cfg.corruption, ctx, seed=seed))
    return out


# -- training ----------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    losses: list[dict]
    epoch_losses: list[dict]
    confusion: dict
    iou: float | None
    miou: float | None
    per_condition: dict
    fusion_weights: dict
    class_names: list[str]
    wall_clock_s: float = 0.0
    metric_rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        """Serializable form; wall-clock is left out so reports stay reproducible."""
        d = asdict(self)
        d.pop("wall_clock_s")
        d.pop("metric_rows")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": self.wall_clock_s}))
        with open(out / "losses.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "total", "ce", "lovasz", "daga"])
            writer.writeheader()
            for row in self.losses:
                writer.writerow({k: row[k] for k in writer.fieldnames})
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["class", "tp", "fp", "fn", "iou"])
            writer.writeheader()
            writer.writerows(self.metric_rows)


def _safe(value: float) -> float | None:
    return None if value is None or math.isnan(value) else value


def evaluate(model: OccupancyModel, cfg: ExperimentConfig, scenes: list[Observations]) -> dict:
    """Confusion matrices per condition and overall, plus the gate's weights per condition."""
    per_cond: dict[str, ConfusionMatrix] = {}
    weights: dict[str, list[float]] = {}
    for obs in scenes:
        out = forward_pipeline(obs, cfg, model)
        cond = obs.weather.condition.value
        cm = per_cond.setdefault(cond, ConfusionMatrix(NUM_CLASSES))
        cm.update(predict_labels(out.logits), obs.labels)
        if out.weights is not None:
            weights[cond] = [out.weights.w_cam, out.weights.w_pts]
    overall = ConfusionMatrix(NUM_CLASSES)
    for cm in per_cond.values():
        overall.merge(cm)
    return {"per_condition": per_cond, "overall": overall, "weights": weights}


def _miou_or_none(cm: ConfusionMatrix) -> float | None:
    try:
        return miou(cm)
    except ValueError:
        return None


def train_model(cfg: ExperimentConfig, scenes: list[Observations] | None = None):
    """Optimize a fresh model; returns ``(model, loss log)``."""
    scenes = scenes if scenes is not None else build_scene_set(cfg, "train")
    model = OccupancyModel(cfg)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    objective = cfg.objective()
    order_rng = np.random.default_rng([cfg.seed, 31337])
    order: list[int] = []
    log = []
    for step in range(cfg.steps):
        if not order:
            order = list(order_rng.permutation(len(scenes)))
        obs = scenes[order.pop(0)]
        opt.lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.min_lr)
        opt.zero_grad()
        out = forward_pipeline(obs, cfg, model)
        losses = total_loss(out.logits, obs.labels, out.v_cam, out.v_pts, objective)
        values = losses.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            raise DivergenceError(f"non-finite loss at step {step}: {values}")
        losses.total.backward()
        opt.step()
        log.append({"step": step, "epoch": step // len(scenes), "lr": opt.lr,
                    "condition": obs.weather.condition.value, **values})
    return model, log


def train(cfg: ExperimentConfig) -> RunReport:
    start = time.perf_counter()
    train_scenes = build_scene_set(cfg, "train")
    model, log = train_model(cfg, train_scenes)
    result = evaluate(model, cfg, build_scene_set(cfg, "eval"))
    overall: ConfusionMatrix = result["overall"]

    epochs: dict[int, list[dict]] = {}
    for row in log:
        epochs.setdefault(row["epoch"], []).append(row)
    epoch_losses = [
        {"epoch": e, **{k: float(np.mean([r[k] for r in rows])) for k in ("total", "ce", "lovasz", "daga")}}
        for e, rows in sorted(epochs.items())
    ]
    per_condition = {
        cond: {"iou": _safe(geometric_iou(cm)), "miou": _miou_or_none(cm), "confusion": cm.to_dict()}
        for cond, cm in result["per_condition"].items()
    }
    config = cfg.to_dict()
    config.pop("out_dir")  # where a report is written is not part of the experiment
    report = RunReport(
        config=config,
        losses=log,
        epoch_losses=epoch_losses,
        confusion=overall.to_dict(),
        iou=_safe(geometric_iou(overall)),
        miou=_miou_or_none(overall),
        per_condition=per_condition,
        fusion_weights=result["weights"],
        class_names=list(SCENE_CLASSES),
        wall_clock_s=time.perf_counter() - start,
        metric_rows=metrics_rows(overall, SCENE_CLASSES),
    )
    if cfg.out_dir:
        report.write(cfg.out_dir)
    return report


# -- sweeps -------------------------------------------------------------------------

def sweep_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _run_cells(cells: list[ExperimentConfig]) -> list[RunReport]:
    threads = sweep_threads()
    if threads == 1:
        return [train(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(train, cells))


def _cell_dir(cfg: ExperimentConfig, name: str) -> str | None:
    return str(Path(cfg.out_dir) / name) if cfg.out_dir else None


def run_ablation(cfg: ExperimentConfig) -> list[dict]:
    """All 2^3 on/off combinations of the text attention, weather gate and alignment loss."""
    combos = list(itertools.product([False, True], repeat=3))
    cells = [
        replace(cfg, instvlm=a, weathfusion=b, daga=c,
                fusion="weathfusion" if b else "concat",
                out_dir=_cell_dir(cfg, f"ablate_i{int(a)}_w{int(b)}_d{int(c)}"))
        for a, b, c in combos
    ]
    rows = []
    for (a, b, c), rep in zip(combos, _run_cells(cells)):
        rows.append({"instvlm": a, "weathfusion": b, "daga": c, "iou": rep.iou,
                     "miou": rep.miou, "wall_clock_s": rep.wall_clock_s})
    return rows


def run_fusion_comparison(cfg: ExperimentConfig) -> list[dict]:
    cells = [replace(cfg, fusion=s, weathfusion=(s == "weathfusion"),
                     out_dir=_cell_dir(cfg, f"fusion_{s}"))
             for s in FUSION_STRATEGIES]
    return [{"strategy": s, "iou": rep.iou, "miou": rep.miou, "wall_clock_s": rep.wall_clock_s}
            for s, rep in zip(FUSION_STRATEGIES, _run_cells(cells))]


ADVERSE_CONDITIONS = ("rain", "clear_day", "night")


def run_adverse(cfg: ExperimentConfig) -> list[dict]:
    """Per-condition scores with the weather gate on and with static concatenation."""
    cfg = replace(cfg, weather_mix=ADVERSE_CONDITIONS)
    cells = [replace(cfg, fusion="weathfusion", weathfusion=on,
                     out_dir=_cell_dir(cfg, f"adverse_wf{int(on)}"))
             for on in (True, False)]
    rows = []
    for on, rep in zip((True, False), _run_cells(cells)):
        for cond in ADVERSE_CONDITIONS:
            stats = rep.per_condition.get(cond, {})
            w = rep.fusion_weights.get(cond, [None, None])
            rows.append({"condition": cond, "weathfusion": on, "iou": stats.get("iou"),
                         "miou": stats.get("miou"), "w_cam": w[0], "w_pts": w[1],
                         "wall_clock_s": rep.wall_clock_s})
    return rows


def write_rows_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# -- recursive prompting -------------------------------------------------------------

@dataclass
class FramePrediction:
    prompt: PromptSpec | None
    labels: np.ndarray
    classes: list[str]


def infer_sequence(frames: list[Observations], cfg: ExperimentConfig,
                   model: OccupancyModel) -> list[FramePrediction]:
    """Frame 0 uses the generic prompt; each later frame is prompted with the previous prediction."""
    if not frames:
        raise ContractError("need at least one frame")
    results: list[FramePrediction] = []
    previous: list[str] = []
    for t, obs in enumerate(frames):
        prompt = build_instance_prompt(previous, obs.weather.region, t, all_classes=SEMANTIC_NAMES) \
            if model.use_instvlm else None
        out = forward_pipeline(obs, cfg, model, prompt=prompt)
        pred = predict_labels(out.logits)
        previous = predicted_classes(pred)
        results.append(FramePrediction(prompt, pred, previous))
    return results
