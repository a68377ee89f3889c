"""Network building blocks: conv feature extractor, heads, gradient reversal, losses, optimizer."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import LabelOutOfRange, NonFiniteGradient, ShapeMismatch
from .rng import torch_gen


@dataclass
class ModelConfig:
    channels: int
    window: int
    widths: tuple[int, ...] = (16, 32)
    kernel: int = 9
    bottleneck_dim: int = 256
    disc_hidden: int = 256
    disc_layers: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


# ---------------------------------------------------------------------------
# initialization

def init_module(module: nn.Module, gen: torch.Generator):
    """Fan-in scaled uniform init for conv/affine layers, ones/zeros for batch norm."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# layers

class FeatureExtractor(nn.Module):
    """Blocks of conv(1, k) -> maxpool(1, 2)/2 -> batch norm -> ReLU."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers, c_in, width = [], cfg.channels, cfg.window
        for c_out in cfg.widths:
            if width < cfg.kernel:
                raise ShapeMismatch(f"window {cfg.window} too short for {len(cfg.widths)} blocks of kernel {cfg.kernel}")
            layers += [
                nn.Conv2d(c_in, c_out, kernel_size=(1, cfg.kernel)),
                nn.MaxPool2d(kernel_size=(1, 2), stride=2),
                nn.BatchNorm2d(c_out, eps=cfg.bn_eps, momentum=cfg.bn_momentum),
                nn.ReLU(),
            ]
            width = (width - cfg.kernel + 1) // 2
            c_in = c_out
        if width < 1:
            raise ShapeMismatch(f"window {cfg.window} collapses to zero width")
        self.net = nn.Sequential(*layers)
        self.in_shape = (cfg.channels, 1, cfg.window)
        self.out_dim = c_in * width

    def forward(self, x):
        if tuple(x.shape[1:]) != self.in_shape:
            raise ShapeMismatch(f"expected input [*, {self.in_shape}], got {tuple(x.shape)}")
        return self.net(x).flatten(1)


def discriminator(in_dim: int, out_dim: int, hidden: int, layers: int) -> nn.Sequential:
    mods, d = [], in_dim
    for _ in range(layers):
        mods += [nn.Linear(d, hidden), nn.ReLU()]
        d = hidden
    mods.append(nn.Linear(d, out_dim))
    return nn.Sequential(*mods)


def grl_backward(upstream_grad, lam: float):
    """Gradient of the reversal layer: ``-lam * upstream_grad``."""
    return -lam * upstream_grad


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grl_backward(grad, ctx.lam), None


def grad_reverse(x, lam: float = 1.0):
    return _GradReverse.apply(x, float(lam))


class GRL(nn.Module):
    def __init__(self, lam: float = 1.0):
        super().__init__()
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        self.lam = lam

    def forward(self, x):
        return grad_reverse(x, self.lam)


# ---------------------------------------------------------------------------
# models

class Predictor(nn.Module):
    """Bottleneck, class head and optional adversarial domain head.

    This is the step-4 group of DIVERSIFY and the whole head of the baselines.
    """

    def __init__(self, cfg: ModelConfig, in_dim: int, n_classes: int, n_domains: int | None):
        super().__init__()
        self.bottleneck = nn.Linear(in_dim, cfg.bottleneck_dim)
        self.classifier = nn.Linear(cfg.bottleneck_dim, n_classes)
        self.adversary = None
        if n_domains is not None:
            self.adversary = discriminator(cfg.bottleneck_dim, n_domains, cfg.disc_hidden, cfg.disc_layers)


class Backbone(nn.Module):
    """Shared feature extractor plus a predictor; the inference surface of every model."""

    def __init__(self, cfg: ModelConfig, n_classes: int, n_domains: int | None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.n_classes = n_classes
        self.featurizer = FeatureExtractor(cfg)
        self.predictor = Predictor(cfg, self.featurizer.out_dim, n_classes, n_domains)
        init_module(self.featurizer, torch_gen(seed, "init.featurizer"))
        init_module(self.predictor.bottleneck, torch_gen(seed, "init.predictor.bottleneck"))
        init_module(self.predictor.classifier, torch_gen(seed, "init.predictor.classifier"))
        if self.predictor.adversary is not None:
            init_module(self.predictor.adversary, torch_gen(seed, "init.predictor.adversary"))

    def embed(self, x):
        return self.predictor.bottleneck(self.featurizer(x))

    def class_logits(self, x):
        return self.predictor.classifier(self.embed(x))

    def forward(self, x):
        return self.class_logits(x)

    def predictor_params(self):
        return list(self.featurizer.parameters()) + list(self.predictor.parameters())


class BaselineModel(Backbone):
    """ERM (no adversary) or DANN (adversary over ``n_domains`` random labels)."""


class DiversifyModel(Backbone):
    """Shared feature extractor and three step-owned parameter groups.

    ``group2``: bottleneck + domain-class head (K*C outputs).
    ``group3``: bottleneck + domain head (K) + class adversary (C).
    ``predictor`` (group 4): bottleneck + class head (C) + domain adversary (K).
    """

    def __init__(self, cfg: ModelConfig, n_classes: int, n_domains: int, seed: int = 0):
        super().__init__(cfg, n_classes, n_domains, seed)
        self.n_domains = n_domains
        f, b = self.featurizer.out_dim, cfg.bottleneck_dim
        self.group2 = nn.ModuleDict({
            "bottleneck": nn.Linear(f, b),
            "head": nn.Linear(b, n_domains * n_classes),
        })
        self.group3 = nn.ModuleDict({
            "bottleneck": nn.Linear(f, b),
            "head": nn.Linear(b, n_domains),
            "adversary": discriminator(b, n_classes, cfg.disc_hidden, cfg.disc_layers),
        })
        for gname in ("group2", "group3"):
            for pname, mod in getattr(self, gname).items():
                init_module(mod, torch_gen(seed, f"init.{gname}.{pname}"))

    def step2_logits(self, x):
        g = self.group2
        return g["head"](g["bottleneck"](self.featurizer(x)))

    def step3_embed(self, x):
        return self.group3["bottleneck"](self.featurizer(x))


# ---------------------------------------------------------------------------
# losses and probabilities

def cross_entropy(logits, targets):
    """Mean negative log-softmax at 0-based ``targets``."""
    k = logits.shape[-1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= k):
        raise LabelOutOfRange(f"targets must lie in 0..{k - 1}")
    return F.cross_entropy(logits, targets)


def softmax_t(logits, T: float = 1.0):
    """Temperature softmax for torch tensors or array-likes (last axis)."""
    if not T > 0:
        raise ValueError("temperature must be positive")
    if isinstance(logits, torch.Tensor):
        return torch.softmax(logits / T, dim=-1)
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimConfig:
    lr: float = 1e-2
    weight_decay: float = 5e-4
    decoupled: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def make_optimizer(params, cfg: OptimConfig) -> torch.optim.Optimizer:
    cls = torch.optim.AdamW if cfg.decoupled else torch.optim.Adam
    return cls(params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay)


def optimizer_step(opt: torch.optim.Optimizer):
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradient("non-finite gradient encountered")
    opt.step()


# ---------------------------------------------------------------------------
# checkpoints

def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(model: Backbone, path, algorithm: str, step_count: int, run_config: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "model.pt")
    meta = {
        "algorithm": algorithm,
        "config_hash": config_hash(run_config or {}),
        "C": model.n_classes,
        "K": getattr(model, "n_domains", None) or _adv_outputs(model),
        "b": model.cfg.bottleneck_dim,
        "input_dims": [model.cfg.channels, 1, model.cfg.window],
        "step_count": int(step_count),
        "model_config": model.cfg.to_dict(),
    }
    Path(path / "model.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def _adv_outputs(model):
    adv = model.predictor.adversary
    return None if adv is None else adv[-1].out_features


def load_checkpoint(path) -> tuple[Backbone, dict]:
    path = Path(path)
    meta = json.loads((path / "model.json").read_text(encoding="utf-8"))
    cfg = ModelConfig(**meta["model_config"])
    if meta["algorithm"] == "diversify":
        model = DiversifyModel(cfg, meta["C"], meta["K"])
    else:
        model = BaselineModel(cfg, meta["C"], meta["K"])
    model.load_state_dict(torch.load(path / "model.pt", weights_only=True))
    model.eval()
    return model, meta
