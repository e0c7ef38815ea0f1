"""MLP detector: encoder -> unit-norm embedding -> two-layer head, plus class proxies."""

from __future__ import annotations

import io
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
N_CLASSES = 2


class DegenerateEmbeddingError(ArithmeticError):
    pass


@dataclass
class ModelConfig:
    layer_widths: tuple[int, ...] = (200, 200, 200)
    head_hidden: int = 200
    n_proxies: int = 4

    @property
    def h(self) -> int:
        return self.layer_widths[-1]


class TIFModel(nn.Module):
    """``f = head o normalize o encoder`` with ``K`` learnable proxies per class.

    The encoder applies ReLU after every layer except the last; the last
    layer's output (width ``h``) is L2-normalized to form the embedding.
    """

    def __init__(self, dim: int, config: ModelConfig, seed: int = 0):
        super().__init__()
        if config.n_proxies < 1:
            raise ValueError("need at least one proxy per class")
        if config.h < 2:
            raise ValueError("embedding dimension must be >= 2")
        if config.n_proxies >= config.h:
            warnings.warn(
                f"K={config.n_proxies} proxies per class in a {config.h}-dim embedding",
                stacklevel=2,
            )
        self.dim = dim
        self.config = config
        self.seed = seed

        layers: list[nn.Module] = []
        width_in = dim
        for i, w in enumerate(config.layer_widths):
            layers.append(nn.Linear(width_in, w))
            if i < len(config.layer_widths) - 1:
                layers.append(nn.ReLU())
            width_in = w
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Linear(config.h, config.head_hidden), nn.ReLU(), nn.Linear(config.head_hidden, 1)
        )
        self.proxies = nn.Parameter(torch.empty(N_CLASSES, config.n_proxies, config.h))
        self.reset_parameters(seed)

    @property
    def h(self) -> int:
        return self.config.h

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    fan_in = module.weight.shape[1]
                    nn.init.kaiming_uniform_(module.weight, nonlinearity="relu", generator=g)
                    bound = 1.0 / np.sqrt(fan_in)
                    module.bias.uniform_(-bound, bound, generator=g)
            # isotropic Gaussian then normalize = uniform on the sphere
            self.proxies.normal_(generator=g)
            self.project_proxies()

    @torch.no_grad()
    def project_proxies(self) -> None:
        self.proxies.div_(self.proxies.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def embed(self, x: torch.Tensor, strict: bool = False) -> torch.Tensor:
        z = self.encoder(x)
        norm = z.norm(dim=-1, keepdim=True)
        if strict and bool((norm == 0).any()):
            raise DegenerateEmbeddingError("encoder produced a zero vector")
        return z / (norm + NORM_EPS)

    def logit_from_embedding(self, e: torch.Tensor) -> torch.Tensor:
        return self.head(e).squeeze(-1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(embeddings, logits)``."""
        e = self.embed(x)
        return e, self.logit_from_embedding(e)

    def logit(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[1]

    @torch.no_grad()
    def predict_proba(self, X: np.ndarray | torch.Tensor, batch_size: int = 4096) -> np.ndarray:
        return torch.sigmoid(torch.from_numpy(self.predict_logits(X, batch_size))).numpy()

    @torch.no_grad()
    def predict_logits(self, X: np.ndarray | torch.Tensor, batch_size: int = 4096) -> np.ndarray:
        was_training = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        out = []
        for start in range(0, len(X), batch_size):
            xb = torch.as_tensor(np.asarray(X[start:start + batch_size]), dtype=dtype)
            out.append(self.logit(xb))
        self.train(was_training)
        if not out:
            return np.zeros(0)
        return torch.cat(out).double().numpy()

    def predict(self, X, batch_size: int = 4096) -> np.ndarray:
        return (self.predict_logits(X, batch_size) >= 0).astype(np.int64)

    @torch.no_grad()
    def embed_numpy(self, X: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        dtype = next(self.parameters()).dtype
        out = [
            self.embed(torch.as_tensor(np.asarray(X[i:i + batch_size]), dtype=dtype))
            for i in range(0, len(X), batch_size)
        ]
        return torch.cat(out).double().numpy() if out else np.zeros((0, self.h))

    def manifest(self) -> dict:
        return {
            "dim": self.dim,
            "h": self.h,
            "K": self.config.n_proxies,
            "layer_widths": list(self.config.layer_widths),
            "head_hidden": self.config.head_hidden,
            "seed": self.seed,
        }


def init_model(dim: int, config: ModelConfig | None = None, seed: int = 0) -> TIFModel:
    return TIFModel(dim, config or ModelConfig(), seed)


def save_checkpoint(model: TIFModel, path: str | Path, extra: dict | None = None) -> None:
    """Write parameters plus a JSON manifest into a single ``.npz`` archive."""
    manifest = model.manifest()
    if extra:
        manifest["extra"] = extra
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["manifest"] = np.array(json.dumps(manifest, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[TIFModel, dict]:
    with np.load(path, allow_pickle=False) as data:
        manifest = json.loads(str(data["manifest"]))
        config = ModelConfig(
            layer_widths=tuple(manifest["layer_widths"]),
            head_hidden=manifest.get("head_hidden", 200),
            n_proxies=manifest["K"],
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = TIFModel(manifest["dim"], config, manifest["seed"])
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    return model, manifest
