"""The semi-supervised multi-view VAE: encoders, decoders, classifier, view weights."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .distributions import DiagGaussian, SeededRng, gaussian_log_pdf
from .errors import ConfigError, PersistenceError, ShapeError
from .numerics import LinearLayer, Mlp, as_matrix, log_softmax, log_sum_exp, softmax

MAGIC = b"MVAE"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    """Network shapes and the class prior.

    Defaults follow the 100-50-30 inference / 30-50-100 generative layout.
    """

    view_dims: list[int]
    num_classes: int
    latent_dim: int = 30
    encoder_hidden: list[int] = field(default_factory=lambda: [100, 50])
    decoder_hidden: list[int] = field(default_factory=lambda: [50, 100])
    classifier_hidden: list[int] = field(default_factory=lambda: [100, 50])
    class_prior: list[float] | None = None
    hidden_activation: str = "tanh"

    def __post_init__(self):
        self.view_dims = [int(d) for d in self.view_dims]
        self.encoder_hidden = [int(h) for h in self.encoder_hidden]
        self.decoder_hidden = [int(h) for h in self.decoder_hidden]
        self.classifier_hidden = [int(h) for h in self.classifier_hidden]
        if not self.view_dims or min(self.view_dims) < 1:
            raise ConfigError(f"view_dims must be non-empty and positive, got {self.view_dims}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for name in ("encoder_hidden", "decoder_hidden", "classifier_hidden"):
            if any(h < 1 for h in getattr(self, name)):
                raise ConfigError(f"{name} widths must be positive")
        if self.class_prior is None:
            self.class_prior = [1.0 / self.num_classes] * self.num_classes
        prior = np.asarray(self.class_prior, dtype=np.float64)
        if prior.shape != (self.num_classes,) or np.any(prior <= 0) or abs(prior.sum() - 1) > 1e-9:
            raise ConfigError("class_prior must be a positive simplex vector of length num_classes")
        self.class_prior = [float(p) for p in prior]

    @property
    def num_views(self) -> int:
        return len(self.view_dims)


class SemiMvaeModel:
    """Parameter container for the encoder/decoder/classifier networks.

    The view weights are ``softmax(rho)``; ``rho`` is the only stored form, so
    the weights stay on the simplex whatever the optimiser does.
    """

    def __init__(self, config: ModelConfig, encoders, decoders, classifier, rho, extras=None):
        self.config = config
        self.encoders: list[Mlp] = list(encoders)
        self.decoders: list[Mlp] = list(decoders)
        self.classifier: Mlp = classifier
        self.rho = np.asarray(rho, dtype=np.float64).copy()
        self.rho_grad = np.zeros_like(self.rho)
        self.extras: dict = dict(extras or {})
        self._validate()

    def _validate(self):
        cfg = self.config
        V, K, d = cfg.num_views, cfg.num_classes, cfg.latent_dim
        if len(self.encoders) != V or len(self.decoders) != V or self.rho.shape != (V,):
            raise ConfigError("need one encoder, one decoder and one weight logit per view")
        for v, (enc, dec) in enumerate(zip(self.encoders, self.decoders)):
            if enc.in_dim != cfg.view_dims[v] + K or enc.out_dim != 2 * d:
                raise ConfigError(f"encoder {v} has shape {enc.in_dim}->{enc.out_dim}")
            if dec.in_dim != d + K or dec.out_dim != 2 * cfg.view_dims[v]:
                raise ConfigError(f"decoder {v} has shape {dec.in_dim}->{dec.out_dim}")
        if self.classifier.in_dim != sum(cfg.view_dims) or self.classifier.out_dim != K:
            raise ConfigError("classifier shape does not match the views/classes")

    @property
    def num_views(self) -> int:
        return self.config.num_views

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def log_class_prior(self) -> np.ndarray:
        return np.log(np.asarray(self.config.class_prior))

    def view_weights(self) -> np.ndarray:
        return softmax(self.rho)

    def log_view_weights(self) -> np.ndarray:
        return log_softmax(self.rho)

    def onehot(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise ValueError(f"class index out of range for {self.num_classes} classes")
        return np.eye(self.num_classes)[y]

    def _check_view(self, v: int):
        if not 0 <= v < self.num_views:
            raise ValueError(f"view index {v} out of range for {self.num_views} views")

    def _check_views(self, X) -> list[np.ndarray]:
        if len(X) != self.num_views:
            raise ValueError(f"expected {self.num_views} views, got {len(X)}")
        out = []
        for v, x in enumerate(X):
            if x is None:
                raise ValueError(f"view {v} is missing")
            m = as_matrix(x)
            if m.shape[1] != self.config.view_dims[v]:
                raise ShapeError(f"view {v} has {m.shape[1]} features, expected {self.config.view_dims[v]}")
            out.append(m)
        n = {m.shape[0] for m in out}
        if len(n) != 1:
            raise ShapeError("views have different row counts")
        return out

    def encode_view(self, v: int, x_v, y) -> DiagGaussian:
        self._check_view(v)
        single = np.ndim(x_v) == 1
        x = as_matrix(x_v)
        if x.shape[1] != self.config.view_dims[v]:
            raise ShapeError(f"view {v} has {x.shape[1]} features, expected {self.config.view_dims[v]}")
        c = np.broadcast_to(self.onehot(y), (x.shape[0], self.num_classes))
        out = self.encoders[v].predict(np.hstack([x, c]))
        d = self.latent_dim
        g = DiagGaussian(out[:, :d], out[:, d:])
        return DiagGaussian(g.mean[0], g.log_var[0]) if single else g

    def posterior(self, X, y) -> "MixturePosterior":
        if len(X) != self.num_views or any(x is None for x in X):
            raise ValueError(f"posterior needs all {self.num_views} views")
        comps = [self.encode_view(v, X[v], y) for v in range(self.num_views)]
        return MixturePosterior(comps, self.view_weights())

    def decode_view(self, v: int, z, y) -> DiagGaussian:
        self._check_view(v)
        single = np.ndim(z) == 1
        zm = as_matrix(z)
        if zm.shape[1] != self.latent_dim:
            raise ShapeError(f"latent code has dimension {zm.shape[1]}, expected {self.latent_dim}")
        c = np.broadcast_to(self.onehot(y), (zm.shape[0], self.num_classes))
        out = self.decoders[v].predict(np.hstack([zm, c]))
        D = self.config.view_dims[v]
        g = DiagGaussian(out[:, :D], out[:, D:])
        return DiagGaussian(g.mean[0], g.log_var[0]) if single else g

    def classifier_logits(self, X) -> np.ndarray:
        return self.classifier.predict(np.hstack(self._check_views(X)))

    def classify(self, X) -> np.ndarray:
        """Class probabilities; a vector for single-sample views, else one row per sample."""
        single = all(np.ndim(x) == 1 for x in X if x is not None)
        p = softmax(self.classifier_logits(X), axis=-1)
        return p[0] if single else p

    def networks(self):
        """Yield ``(prefix, mlp)`` in the declared parameter order."""
        for v, enc in enumerate(self.encoders):
            yield f"encoder{v}", enc
        for v, dec in enumerate(self.decoders):
            yield f"decoder{v}", dec
        yield "classifier", self.classifier

    def parameters(self):
        """Yield ``(name, param, grad)`` for every parameter array, rho last."""
        for prefix, net in self.networks():
            for suffix, p, g in net.parameters():
                yield f"{prefix}.{suffix}", p, g
        yield "rho", self.rho, self.rho_grad

    def zero_grad(self) -> None:
        for _, _, g in self.parameters():
            g[...] = 0.0

    def num_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.parameters())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p, _ in self.parameters()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_parameters():
            raise ShapeError("flat parameter vector has the wrong length")
        i = 0
        for _, p, _ in self.parameters():
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size

    def get_flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for _, _, g in self.parameters()])

    def copy(self) -> "SemiMvaeModel":
        clone = _skeleton(self.config, [n.activations for _, n in self.networks()], self.extras)
        clone.set_flat(self.get_flat())
        return clone


def block_of(name: str) -> str:
    """Map a parameter name to its block: ``phi<v>``, ``theta<v>``, ``classifier`` or ``rho``."""
    head = name.split(".", 1)[0]
    if head.startswith("encoder"):
        return "phi" + head[len("encoder") :]
    if head.startswith("decoder"):
        return "theta" + head[len("decoder") :]
    return head


@dataclass
class MixturePosterior:
    components: list[DiagGaussian]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.components) != self.weights.shape[0]:
            raise ShapeError("one weight per component required")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be a positive simplex vector")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ShapeError("mixture components have different dimensions")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def sample(self, rng: SeededRng, n: int) -> np.ndarray:
        """Ancestral draws: pick a component by weight, then sample it."""
        which = rng.generator.choice(len(self.components), size=n, p=self.weights)
        eps = rng.normal((n, self.dim))
        means = np.stack([c.mean for c in self.components])[which]
        stds = np.stack([c.std for c in self.components])[which]
        return means + stds * eps

    def log_pdf(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        terms = np.stack(
            [np.log(w) + gaussian_log_pdf(z, c.mean, c.log_var) for w, c in zip(self.weights, self.components)],
            axis=-1,
        )
        return log_sum_exp(terms, axis=-1)


def _layer_sizes(cfg: ModelConfig):
    V, K, d = cfg.num_views, cfg.num_classes, cfg.latent_dim
    enc = [[cfg.view_dims[v] + K, *cfg.encoder_hidden, 2 * d] for v in range(V)]
    dec = [[d + K, *cfg.decoder_hidden, 2 * cfg.view_dims[v]] for v in range(V)]
    cls = [sum(cfg.view_dims), *cfg.classifier_hidden, K]
    return enc, dec, cls


def init_model(config: ModelConfig, seed) -> SemiMvaeModel:
    """Xavier-initialised model with equal view weights 1/V."""
    rng = seed if isinstance(seed, SeededRng) else SeededRng(seed)
    enc_sizes, dec_sizes, cls_sizes = _layer_sizes(config)
    act = config.hidden_activation
    encoders = [
        Mlp.build(s, rng.split(f"encoder{v}").generator, hidden=act) for v, s in enumerate(enc_sizes)
    ]
    decoders = [
        Mlp.build(s, rng.split(f"decoder{v}").generator, hidden=act) for v, s in enumerate(dec_sizes)
    ]
    classifier = Mlp.build(cls_sizes, rng.split("classifier").generator, hidden=act)
    return SemiMvaeModel(config, encoders, decoders, classifier, np.zeros(config.num_views))


def _skeleton(config: ModelConfig, activations, extras=None) -> SemiMvaeModel:
    enc_sizes, dec_sizes, cls_sizes = _layer_sizes(config)
    sizes = enc_sizes + dec_sizes + [cls_sizes]
    nets = []
    for s, acts in zip(sizes, activations):
        layers = [LinearLayer(np.zeros((o, i)), np.zeros(o)) for i, o in zip(s, s[1:])]
        nets.append(Mlp(layers, acts))
    V = config.num_views
    return SemiMvaeModel(config, nets[:V], nets[V : 2 * V], nets[-1], np.zeros(V), extras)


def save_model(model: SemiMvaeModel, path) -> None:
    """Write ``MVAE`` magic, version byte, length-prefixed JSON header, float64 LE blocks."""
    blocks = list(model.parameters())
    header = {
        "config": asdict(model.config),
        "activations": [net.activations for _, net in model.networks()],
        "blocks": [[name, list(p.shape)] for name, p, _ in blocks],
        "extras": model.extras,
    }
    meta = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for _, p, _ in blocks)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<I", len(meta)) + meta + payload)
    except OSError as exc:
        raise PersistenceError(f"cannot write model to {path}: {exc}") from exc


def load_model(path) -> SemiMvaeModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read model from {path}: {exc}") from exc
    if len(data) < 9 or data[:4] != MAGIC:
        raise PersistenceError(f"{path} is not a model file (bad magic bytes)")
    if data[4] != FORMAT_VERSION:
        raise PersistenceError(f"{path} has format version {data[4]}, expected {FORMAT_VERSION}")
    (meta_len,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + meta_len:
        raise PersistenceError(f"{path} is truncated inside the header")
    try:
        header = json.loads(data[9 : 9 + meta_len].decode("utf-8"))
        config = ModelConfig(**header["config"])
        model = _skeleton(config, header["activations"], header.get("extras"))
    except (ValueError, KeyError, TypeError) as exc:
        raise PersistenceError(f"{path} has a malformed header: {exc}") from exc
    expected = [[name, list(p.shape)] for name, p, _ in model.parameters()]
    if header["blocks"] != expected:
        raise PersistenceError(f"{path} parameter layout does not match its config")
    payload = data[9 + meta_len :]
    n = model.num_parameters()
    if len(payload) != 8 * n:
        raise PersistenceError(f"{path} holds {len(payload)} payload bytes, expected {8 * n}")
    model.set_flat(np.frombuffer(payload, dtype="<f8").astype(np.float64))
    return model
