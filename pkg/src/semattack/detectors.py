"""Fake/real detectors, the query ledger and the identity model.

Every detector exposes ``score(images, ledger=None)`` returning the probability
that each image is fake. Detectors charge the ledger themselves, so an HTTP
detector can bill retries while a local model bills one unit per image.
"""

from __future__ import annotations

import base64
import io
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import requests
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .checkpoint import load_state, parameter_digest, read_manifest, save_checkpoint, seeded_generator
from .errors import AdapterError, ConfigurationError, QueryBudgetError, TrainingError
from .imaging import to_tensor

log = logging.getLogger(__name__)


class QueryLedger:
    """Thread-safe, monotone count of detector evaluations with an optional budget."""

    def __init__(self, budget: int | None = None):
        if budget is not None and budget < 0:
            raise ConfigurationError("query budget must be >= 0")
        self.budget = budget
        self._count = 0
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return self._count

    @property
    def remaining(self) -> int | None:
        return None if self.budget is None else self.budget - self._count

    def charge(self, n: int = 1):
        """Reserve ``n`` queries, all or nothing."""
        with self._lock:
            if self.budget is not None and self._count + n > self.budget:
                raise QueryBudgetError(
                    f"query budget exhausted ({self._count} used of {self.budget}, {n} requested)")
            self._count += n


class Detector:
    """Base detector contract: ``score`` maps NHWC images to P(fake)."""

    has_gradients = False
    loss = "bce"
    threshold = 0.5

    def score(self, images, ledger: QueryLedger | None = None) -> np.ndarray:
        raise NotImplementedError

    def torch_logits(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError(f"{type(self).__name__} does not expose gradients")


class TorchDetector(nn.Module, Detector):
    """A detector backed by a differentiable logit network."""

    has_gradients = True

    def __init__(self):
        nn.Module.__init__(self)

    def torch_logits(self, x):
        return self(x)

    def score(self, images, ledger=None):
        x = to_tensor(images)
        if ledger is not None:
            ledger.charge(x.shape[0])
        with torch.no_grad():
            return torch.sigmoid(self.torch_logits(x)).double().numpy()

    def torch_score(self, x):
        return torch.sigmoid(self.torch_logits(x))


def detect(detector: Detector, image, ledger: QueryLedger | None = None) -> float:
    """Score a single HWC image, charging the ledger."""
    return float(detector.score(np.asarray(image)[None], ledger)[0])


class ToyDetector(TorchDetector):
    """Three conv blocks and a linear head; blocks 1-2 double as perceptual features."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.width = width
        self.block1 = nn.Sequential(nn.Conv2d(3, width, 3, padding=1), nn.LeakyReLU(0.2), nn.AvgPool2d(2))
        self.block2 = nn.Sequential(nn.Conv2d(width, 2 * width, 3, padding=1), nn.LeakyReLU(0.2), nn.AvgPool2d(2))
        self.block3 = nn.Sequential(nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.LeakyReLU(0.2), nn.AvgPool2d(2))
        self.head = nn.Linear(2 * width * 16, 1)
        self.heldout_accuracy = None

    def features(self, x):
        f1 = self.block1(x)
        return f1, self.block2(f1)

    def forward(self, x):
        _, f2 = self.features(x)
        return self.head(self.block3(f2).flatten(1)).squeeze(1)

    def digest(self):
        return parameter_digest(self)

    def save(self, directory, seed=None, extra=None):
        meta = {"heldout_accuracy": self.heldout_accuracy, **(extra or {})}
        return save_checkpoint(self, directory, "toy_detector", {"width": self.width}, seed, meta)

    @classmethod
    def load(cls, directory) -> "ToyDetector":
        manifest = read_manifest(directory)
        d = cls(**manifest["config"])
        d.load_state_dict(load_state(directory))
        d.heldout_accuracy = manifest.get("heldout_accuracy")
        return d.eval().requires_grad_(False)


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 6
    batch_size: int = 64
    lr: float = 2e-3
    holdout: float = 0.2
    width: int = 16


def accuracy(detector: Detector, images, labels) -> float:
    """Fraction predicted as the given label (1 = fake) at threshold 0.5."""
    pred = detector.score(images) >= detector.threshold
    return float(np.mean(pred == np.asarray(labels, dtype=bool)))


def fit_detector(model: TorchDetector, images: torch.Tensor, labels: torch.Tensor, seed: int,
                 cfg: DetectorTrainConfig, perturb=None):
    """Train ``model`` in place with BCE. ``perturb(model, x, y)`` may replace each
    batch's second half by adversarial examples (adversarial training)."""
    rng = seeded_generator(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n = images.shape[0]
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=rng)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = images[idx], labels[idx]
            if perturb is not None:
                half = x.shape[0] // 2
                model.eval()
                adv = perturb(model, x[half:], y[half:])
                model.train()
                x = torch.cat([x[:half], adv])
            loss = F.binary_cross_entropy_with_logits(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"detector training diverged in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * x.shape[0]
        log.info("detector epoch %d loss %.4f", epoch, total / n)
    return model.eval()


def _split(real, fake, seed, holdout):
    x = torch.cat([to_tensor(real), to_tensor(fake)])
    y = torch.cat([torch.zeros(len(real)), torch.ones(len(fake))])
    order = torch.randperm(len(y), generator=seeded_generator(seed))
    n_test = int(round(holdout * len(y)))
    test, train = order[:n_test], order[n_test:]
    return x[train], y[train], x[test], y[test]


def train_toy_detector(real, fake, seed: int = 0, cfg: DetectorTrainConfig = DetectorTrainConfig()) -> ToyDetector:
    """Train a real (0) vs fake (1) CNN; held-out accuracy is stored on the model."""
    if len(real) == 0 or len(fake) == 0:
        raise ConfigurationError("both real and fake collections must be nonempty")
    x_tr, y_tr, x_te, y_te = _split(real, fake, seed, cfg.holdout)
    torch.manual_seed(seed)
    model = ToyDetector(cfg.width)
    fit_detector(model, x_tr, y_tr, seed, cfg)
    model.requires_grad_(False)
    if len(y_te):
        with torch.no_grad():
            pred = (model(x_te) > 0).float()
        model.heldout_accuracy = float((pred == y_te).float().mean())
    return model


class LinearProbeDetector(TorchDetector):
    """``sigmoid(gain * (<v, x> - bias))``: a differentiable detector with a known readout.

    Useful as a controllable victim whose score moves monotonically with one
    image direction.
    """

    def __init__(self, direction: torch.Tensor, bias: float, gain: float = 1.0):
        super().__init__()
        self.register_buffer("direction", direction.detach().clone().float().reshape(1, -1))
        self.bias = float(bias)
        self.gain = float(gain)

    def forward(self, x):
        return self.gain * ((x.flatten(1) * self.direction).sum(1) - self.bias)


# -- identity ---------------------------------------------------------------

class IdentityModel(nn.Module):
    """CNN face embedder returning unit vectors; ``threshold`` is tau_id."""

    def __init__(self, dim: int = 16, width: int = 16, threshold: float = 0.8):
        super().__init__()
        self.dim, self.width, self.threshold = dim, width, threshold
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Flatten(), nn.Linear(2 * width * 16, dim),
        )

    def forward(self, x):
        return F.normalize(self.net(x).double(), dim=1).float()

    def embed(self, images) -> np.ndarray:
        with torch.no_grad():
            e = self.net(to_tensor(images)).double()
        return F.normalize(e, dim=1).numpy()

    def save(self, directory, seed=None):
        return save_checkpoint(self, directory, "identity_model",
                               {"dim": self.dim, "width": self.width, "threshold": self.threshold}, seed)

    @classmethod
    def load(cls, directory) -> "IdentityModel":
        m = cls(**read_manifest(directory)["config"])
        m.load_state_dict(load_state(directory))
        return m.eval().requires_grad_(False)


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)


def identity_similarity(model: IdentityModel, a, b) -> float:
    ea, eb = model.embed(np.stack([np.asarray(a), np.asarray(b)]))
    return float(cosine(ea, eb))


@dataclass(frozen=True)
class IdentityTrainConfig:
    steps: int = 600
    identities_per_batch: int = 16
    views_per_identity: int = 4
    temperature: float = 0.1
    lr: float = 2e-3
    blur_prob: float = 0.5


def train_identity_model(seed: int = 0, cfg: IdentityTrainConfig = IdentityTrainConfig(),
                         threshold: float = 0.8) -> IdentityModel:
    """Supervised-contrastive training on renders that share identity parameters.

    A random share of views is blurred so the embedder tolerates the softer
    look of generated faces.
    """
    from .toyfaces import render_face, sample_spec

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    model = IdentityModel(threshold=threshold)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    k, v = cfg.identities_per_batch, cfg.views_per_identity
    labels = torch.arange(k).repeat_interleave(v)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(k * v, dtype=torch.bool)
    for step in range(cfg.steps):
        imgs = []
        for _ in range(k):
            ident = rng.random(2)
            for _ in range(v):
                spec = sample_spec(rng).replace(face_width=ident[0], eye_spacing=ident[1])
                imgs.append(render_face(spec))
        x = to_tensor(np.stack(imgs))
        if cfg.blur_prob > 0:
            pick = torch.rand(x.shape[0], 1, 1, 1, generator=seeded_generator(seed + step)) < cfg.blur_prob
            x = torch.where(pick, F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, 1), x)
        e = F.normalize(model.net(x), dim=1)
        logits = (e @ e.T / cfg.temperature).masked_fill(eye, -1e9)
        log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
        pos = same & ~eye
        loss = -(log_prob * pos).sum(1).div(pos.sum(1)).mean()
        if not torch.isfinite(loss):
            raise TrainingError("identity model diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 200 == 0:
            log.info("identity step %d loss %.4f", step, loss.item())
    return model.eval().requires_grad_(False)


# -- external service -------------------------------------------------------

@dataclass(frozen=True)
class AdapterConfig:
    """How to talk to a remote scoring service.

    ``score_path`` is a dotted path into the JSON response (integers index
    lists). ``auth_env`` names an environment variable holding a bearer token.
    """

    endpoint: str
    image_field: str = "image"
    score_path: str = "fake_score"
    extra_fields: dict = field(default_factory=dict)
    auth_env: str | None = None
    timeout: float = 10.0
    attempts: int = 3
    backoff: float = 0.5
    max_connections: int = 4


def extract_path(doc, path: str):
    node = doc
    for part in path.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node[part]
    return node


def encode_png_base64(image) -> str:
    arr = np.rint(np.clip(np.asarray(image, dtype=np.float32), 0, 1) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpDetector(Detector):
    """Gradient-free detector backed by an HTTP scoring endpoint."""

    has_gradients = False

    def __init__(self, cfg: AdapterConfig, session: requests.Session | None = None):
        self.cfg = cfg
        self.session = session or requests.Session()

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.cfg.auth_env:
            token = os.environ.get(self.cfg.auth_env)
            if token is None:
                raise AdapterError(f"credential environment variable {self.cfg.auth_env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _score_one(self, image, ledger):
        payload = {**self.cfg.extra_fields, self.cfg.image_field: encode_png_base64(image)}
        last = None
        for attempt in range(self.cfg.attempts):
            if attempt:
                time.sleep(self.cfg.backoff * 2 ** (attempt - 1))
            if ledger is not None:
                ledger.charge(1)
            try:
                resp = self.session.post(self.cfg.endpoint, json=payload, headers=self._headers(),
                                         timeout=self.cfg.timeout)
            except requests.RequestException as exc:
                last = f"network error: {exc}"
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise AdapterError(f"HTTP {resp.status_code} from {self.cfg.endpoint}")
            return self._parse(resp)
        raise AdapterError(f"{self.cfg.endpoint} failed after {self.cfg.attempts} attempts ({last})")

    def _parse(self, resp) -> float:
        try:
            value = extract_path(resp.json(), self.cfg.score_path)
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise AdapterError(f"malformed response: cannot read {self.cfg.score_path!r}") from exc
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise AdapterError(f"score at {self.cfg.score_path!r} is not a number: {value!r}")
        if not 0.0 <= value <= 1.0:
            raise AdapterError(f"score {value} outside [0, 1]")
        return float(value)

    def score(self, images, ledger=None):
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if self.cfg.max_connections <= 1 or len(images) == 1:
            return np.array([self._score_one(img, ledger) for img in images])
        with ThreadPoolExecutor(max_workers=self.cfg.max_connections) as pool:
            return np.array(list(pool.map(lambda img: self._score_one(img, ledger), images)))


def external_detector_adapter(endpoint: str, auth_env: str | None = None, **options) -> HttpDetector:
    return HttpDetector(AdapterConfig(endpoint=endpoint, auth_env=auth_env, **options))


def adapter_config_dict(cfg: AdapterConfig) -> dict:
    return asdict(cfg)
