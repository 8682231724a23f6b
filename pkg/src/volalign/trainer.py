"""Episodic training, the AdamW update, the ablation harness and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ShapeMismatch
from .fewshot import (
    Episode,
    correct_counts_by_u,
    mean_ci95,
    predict,
    prototype_text,
    prototype_vis,
    prototypes,
    support_features,
    text_prototypes_t,
    u_grid,
)
from .fusion import PARAM_NAMES, FusionConfig, ModelParams, init_params
from .geometry import KernelSpec
from .losses import LossConfig, align_t, cosine_logits_t, cross_entropy_sum_t, infonce_t
from .rng import Stream
from .synthdata import GeneratorConfig, gen_class_centers, gen_episode, split_pool

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("none", "infonce", "linear_volume", "kernel_volume")

# child-stream keys under the training seed / generator seed
_INIT, _TRAIN_EPISODES = 5, 10
_TEST_EPISODES, _VAL_EPISODES = 20, 30


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    episodes_per_epoch: int = 50
    learning_rate: float = 5e-4
    weight_decay: float = 0.0
    loss_variant: str = "kernel_volume"
    kernel: KernelSpec = field(default_factory=KernelSpec.rbf)
    temperature: float = 0.2
    anchor: str = "text"
    fusion_mode: str = "gate_attention"
    seed: int = 0
    n_way: int = 5
    k_shot: int = 1
    query_per_class: int = 15
    hidden: int = 32
    heads: int = 4
    use_visual: bool = True
    align_weight: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and episodes_per_epoch >= 1")
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        FusionConfig(self.fusion_mode)
        LossConfig(self.temperature, self.kernel, self.anchor)

    @property
    def loss_config(self):
        kernel = KernelSpec.linear() if self.loss_variant == "linear_volume" else self.kernel
        return LossConfig(self.temperature, kernel, self.anchor)

    @property
    def fusion(self):
        return FusionConfig(self.fusion_mode)

    def to_dict(self):
        d = asdict(self)
        d["kernel"] = self.kernel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "kernel" in d and isinstance(d["kernel"], dict):
            d["kernel"] = KernelSpec.from_dict(d["kernel"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    ce_loss: float
    align_loss: float
    train_accuracy: float
    degenerate: int


@dataclass
class MetricsTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, MetricsTrace) and [asdict(r) for r in self.records] == [
            asdict(r) for r in other.records]


@dataclass
class LossInfo:
    ce: float
    align: float
    accuracy: float
    degenerate: int


def _forward(episode: Episode, prm: dict, cfg: TrainConfig):
    ct, zt, _ = text_prototypes_t(episode, prm, cfg.fusion_mode)
    logits = cosine_logits_t(episode.query, ct, cfg.temperature)
    ce = cross_entropy_sum_t(logits, episode.query_labels)
    acc = float(np.mean(np.argmax(logits.value, axis=1) == episode.query_labels))
    if cfg.loss_variant == "none":
        return ce, ce, 0.0, acc, 0
    mods = [zt, ct]
    if cfg.use_visual:
        zv = ad.normalize_rows(ad.Tensor(episode.synthetic.mean(axis=1)))
        mods.append(zv)
    if cfg.loss_variant == "infonce":
        align, bad = infonce_t(mods, cfg.loss_config), 0
    else:
        align, bad = align_t(mods, cfg.loss_config, on_degenerate="skip")
    return ce + align * cfg.align_weight, ce, align.item(), acc, bad


def total_loss(episode: Episode, params: ModelParams, cfg: TrainConfig):
    """Summed query cross-entropy plus the configured alignment term.

    Returns ``(loss, gradient as ModelParams, LossInfo)``. Singular kernel
    Grams contribute their value but no gradient; they are counted in
    ``LossInfo.degenerate``.
    """
    prm = {k: ad.leaf(v) for k, v in params.arrays().items()}
    loss, ce, align, acc, bad = _forward(episode, prm, cfg)
    loss.backward()
    grads = ModelParams.from_arrays(
        {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in prm.items()})
    if bad:
        log.debug("skipped alignment gradient for %d degenerate batch rows", bad)
    return loss.item(), grads, LossInfo(ce.item(), align, acc, bad)


def total_loss_value(episode: Episode, params: ModelParams, cfg: TrainConfig) -> float:
    loss, *_ = _forward(episode, {k: ad.Tensor(v) for k, v in params.arrays().items()}, cfg)
    return loss.item()


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams):
        a = params.arrays()
        return cls({k: np.zeros_like(x) for k, x in a.items()}, {k: np.zeros_like(x) for k, x in a.items()})


def optimizer_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float,
                   weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8):
    """One AdamW step (decoupled weight decay). Returns new params and state."""
    p, g = params.arrays(), grads.arrays()
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k in PARAM_NAMES:
        if p[k].shape != g[k].shape:
            raise ShapeMismatch(f"gradient for {k} has shape {g[k].shape}, expected {p[k].shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g[k]
        v = beta2 * state.v[k] + (1.0 - beta2) * g[k] * g[k]
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        new_p[k] = p[k] * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return ModelParams.from_arrays(new_p), AdamState(new_m, new_v, step)


def initial_params(cfg: TrainConfig, gen: GeneratorConfig) -> ModelParams:
    return init_params(gen.dim, gen.resolved_text_dim, cfg.hidden, cfg.heads, Stream(cfg.seed).child(_INIT))


def train(cfg: TrainConfig, gen: GeneratorConfig, centers=None):
    """Run ``epochs * episodes_per_epoch`` training episodes; returns (params, trace)."""
    centers = gen_class_centers(gen) if centers is None else centers
    train_pool, _, _ = split_pool(gen)
    params = initial_params(cfg, gen)
    state = AdamState.zeros_like(params)
    root = Stream(cfg.seed)
    trace = MetricsTrace()
    for epoch in range(cfg.epochs):
        sums = np.zeros(4)
        degenerate = 0
        for e in range(cfg.episodes_per_epoch):
            ep = gen_episode(gen, centers, cfg.n_way, cfg.k_shot, cfg.query_per_class,
                             root.child(_TRAIN_EPISODES, epoch, e), train_pool)
            loss, grads, info = total_loss(ep, params, cfg)
            params, state = optimizer_step(params, grads, state, cfg.learning_rate, cfg.weight_decay,
                                           cfg.beta1, cfg.beta2, cfg.eps)
            sums += (loss, info.ce, info.align, info.accuracy)
            degenerate += info.degenerate
        mean = sums / cfg.episodes_per_epoch
        trace.records.append(EpochRecord(epoch + 1, *map(float, mean), degenerate))
        log.info("epoch %d loss %.4f ce %.4f align %.4f acc %.4f", epoch + 1, *mean)
    return params, trace


# ------------------------------------------------------------------ ablation


def toy_generator(**overrides) -> GeneratorConfig:
    """The standard toy world: 5-way 1-shot at dim 64 with moderate noise.

    Support tokens are noisy enough that a lone shot is a weak prototype,
    while text and synthetic samples each carry independent class evidence.
    A large class pool keeps training classes from being memorized.
    """
    base = dict(class_pool=1000, dim=64, token_count=9, support_noise=6.0, query_noise=2.5,
                text_shift=1.0, synthetic_shift=1.5)
    base.update(overrides)
    return GeneratorConfig(**base)


def toy_train_config(**overrides) -> TrainConfig:
    """Training settings paired with :func:`toy_generator` (500 episodes)."""
    base = dict(epochs=5, episodes_per_epoch=100, learning_rate=1e-2)
    base.update(overrides)
    return TrainConfig(**base)



@dataclass(frozen=True)
class Variant:
    """One ablation row: which prompts are used and how the model is trained."""

    name: str
    text_prompt: bool = True
    visual_prompt: bool = True
    overrides: tuple = ()

    def config(self, base: TrainConfig) -> TrainConfig:
        return replace(base, use_visual=self.visual_prompt, **dict(self.overrides))

    @property
    def trained(self):
        return self.text_prompt


def loss_variants():
    """The contrastive-objective rows: none, InfoNCE, linear volume, kernel volume."""
    return [Variant(v, overrides=(("loss_variant", v),)) for v in LOSS_VARIANTS]


def prompt_variants():
    """Prompt rows: baseline, text, text+align, visual, visual+align, both, both+align."""
    none, kv = (("loss_variant", "none"),), (("loss_variant", "kernel_volume"),)
    return [
        Variant("baseline", False, False, none),
        Variant("text", True, False, none),
        Variant("text+align", True, False, kv),
        Variant("visual", False, True, none),
        Variant("visual+align", False, True, kv),
        Variant("text+visual", True, True, none),
        Variant("text+visual+align", True, True, kv),
    ]


@dataclass
class AblationRow:
    name: str
    mean: float
    ci95: float
    per_seed: list
    u: list

    def to_dict(self):
        return asdict(self)


def held_out_episodes(gen: GeneratorConfig, cfg: TrainConfig, count: int, split: str, centers=None):
    centers = gen_class_centers(gen) if centers is None else centers
    _, val_pool, test_pool = split_pool(gen)
    pool, key = (val_pool, _VAL_EPISODES) if split == "val" else (test_pool, _TEST_EPISODES)
    root = Stream(gen.seed)
    return [gen_episode(gen, centers, cfg.n_way, cfg.k_shot, cfg.query_per_class, root.child(key, i), pool)
            for i in range(count)]


def _episode_accuracies(variant: Variant, params, cfg, val_eps, test_eps, grid_step):
    """Per-episode test accuracies and the u used."""
    if not variant.text_prompt:
        accs = []
        for ep in test_eps:
            protos = prototype_vis(ep) if variant.visual_prompt else prototypes(support_features(ep))
            accs.append(np.mean(predict(ep.query, protos.per_class) == ep.query_labels))
        return accs, 0.0
    if not variant.visual_prompt:
        return [np.mean(predict(ep.query, prototype_text(ep, params, cfg.fusion).per_class) == ep.query_labels)
                for ep in test_eps], 1.0
    us = u_grid(grid_step)
    correct = np.zeros(len(us), dtype=np.int64)
    for ep in val_eps:
        correct += correct_counts_by_u(ep, us, prototype_text(ep, params, cfg.fusion).per_class,
                                       prototype_vis(ep).per_class)
    u = float(us[int(np.argmax(correct))])
    accs = [correct_counts_by_u(ep, [u], prototype_text(ep, params, cfg.fusion).per_class,
                                prototype_vis(ep).per_class)[0] / ep.query.shape[0] for ep in test_eps]
    return accs, u


def ablate(base: TrainConfig, gen: GeneratorConfig, variants, seeds=(0, 1, 2, 3, 4),
           n_test: int = 200, n_val: int = 50, grid_step: float = 0.1, cache=None):
    """Train and evaluate every variant on shared seeds and held-out episodes.

    Seed ``s`` shifts both the generator seed and the training seed, so each
    seed is an independent synthetic world. Accuracies are in percent; the
    confidence half-width is over all held-out episodes of all seeds.
    ``cache`` (a dict) memoizes trained parameters across calls.
    """
    variants = list(variants)
    if not variants:
        raise ValueError("at least one variant is required")
    cache = {} if cache is None else cache
    per_variant = {i: ([], [], []) for i in range(len(variants))}
    for s in seeds:
        g = replace(gen, seed=gen.seed + s)
        centers = gen_class_centers(g)
        val_eps = held_out_episodes(g, base, n_val, "val", centers)
        test_eps = held_out_episodes(g, base, n_test, "test", centers)
        for i, var in enumerate(variants):
            cfg = replace(var.config(base), seed=base.seed + s)
            params = None
            if var.trained:
                # without an alignment term the visual flag does not affect training
                trained_cfg = replace(cfg, use_visual=True) if cfg.loss_variant == "none" else cfg
                key = (json.dumps(trained_cfg.to_dict(), sort_keys=True), json.dumps(g.to_dict(), sort_keys=True))
                if key not in cache:
                    cache[key] = train(trained_cfg, g, centers)[0]
                params = cache[key]
            accs, u = _episode_accuracies(var, params, cfg, val_eps, test_eps, grid_step)
            per_variant[i][0].extend(accs)
            per_variant[i][1].append(100.0 * float(np.mean(accs)))
            per_variant[i][2].append(u)
    rows = []
    for i, var in enumerate(variants):
        accs, seed_means, us = per_variant[i]
        m, h = mean_ci95(100.0 * np.asarray(accs, dtype=np.float64))
        rows.append(AblationRow(var.name, m, h, seed_means, us))
    return rows


# --------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "volalign-checkpoint"


def save_checkpoint(path, params: ModelParams, meta=None) -> None:
    """Line-oriented text: one JSON header, then each tensor as rows of its last axis."""
    arrays = params.arrays()
    header = {"format": CHECKPOINT_FORMAT, "version": 1, "meta": meta or {},
              "tensors": [{"name": k, "shape": list(arrays[k].shape)} for k in PARAM_NAMES]}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for k in PARAM_NAMES:
            a = arrays[k]
            for row in a.reshape(-1, a.shape[-1]):
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_checkpoint(path):
    """Returns (ModelParams, meta dict)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    try:
        header = json.loads(lines[0])
        if header.get("format") != CHECKPOINT_FORMAT:
            raise FormatError("not a checkpoint file")
        tensors = header["tensors"]
    except (IndexError, ValueError, KeyError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    pos, out = 1, {}
    for spec in tensors:
        shape = tuple(spec["shape"])
        n_rows = int(np.prod(shape[:-1], dtype=np.int64))
        rows = lines[pos:pos + n_rows]
        if len(rows) != n_rows:
            raise FormatError(f"checkpoint truncated inside {spec['name']}")
        try:
            data = np.array([[float(x) for x in r.split()] for r in rows], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"bad value in {spec['name']}: {exc}") from exc
        if data.shape != (n_rows, shape[-1]):
            raise FormatError(f"row width mismatch in {spec['name']}")
        out[spec["name"]] = data.reshape(shape)
        pos += n_rows
    return ModelParams.from_arrays(out), header["meta"]
