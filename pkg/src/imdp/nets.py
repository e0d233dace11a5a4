"""Generator and critic networks with a shared trunk, plus checkpoint IO.

The generator maps noise-plus-codes to a tanh-bounded feature vector.
The critic and the code-recovery head share one trunk: the trunk's
parameter arrays have a single storage location, so an update made
through either head is observed by the other.  Architectures are plain
affine stacks sized to train in minutes on a desk machine.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, ParamStore, as_tensor, forward
from .latent import Codes, LatentSpec
from .privacy import PrivacySpec

INIT_SCALE = 0.05  # weights drawn uniformly from [-INIT_SCALE, INIT_SCALE]

CHECKPOINT_MAGIC = b"IMDP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, foreign, or incompatible checkpoint file."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture description shared by the builder functions."""

    latent: LatentSpec
    data_dim: int
    gen_hidden: tuple[int, ...] = (128, 128)
    trunk_hidden: tuple[int, ...] = (128, 128)
    seed: int = 0

    def __post_init__(self):
        if self.data_dim < 1:
            raise ValueError("data_dim must be >= 1")
        for w in (*self.gen_hidden, *self.trunk_hidden):
            if w < 1:
                raise ValueError("hidden widths must be >= 1")


def _init_affine(store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator) -> None:
    store.add(f"{name}.W", rng.uniform(-INIT_SCALE, INIT_SCALE, size=(n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


class GeneratorNet:
    """Noise-plus-codes to data space; output bounded in [-1, 1] by tanh."""

    def __init__(self, cfg: NetConfig, store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        self._graphs: dict[int, tuple[Graph, int, int]] = {}

    @property
    def input_width(self) -> int:
        return self.cfg.latent.input_width

    @property
    def data_dim(self) -> int:
        return self.cfg.data_dim

    def init_params(self, rng: np.random.Generator) -> None:
        widths = [self.input_width, *self.cfg.gen_hidden]
        for i in range(len(widths) - 1):
            _init_affine(self.store, f"gen.h{i}", widths[i], widths[i + 1], rng)
        _init_affine(self.store, "gen.out", widths[-1], self.cfg.data_dim, rng)

    def param_names(self) -> list[str]:
        return self.store.names_with_prefix("gen.")

    def append_to_graph(self, g: Graph, x: int) -> int:
        """Add the generator stack to a graph; returns the output node."""
        widths = [self.input_width, *self.cfg.gen_hidden]
        h = x
        for i in range(len(widths) - 1):
            w = g.param(f"gen.h{i}.W", (widths[i], widths[i + 1]))
            b = g.param(f"gen.h{i}.b", (widths[i + 1],))
            h = g.relu(g.affine(h, w, b))
        w = g.param("gen.out.W", (widths[-1], self.cfg.data_dim))
        b = g.param("gen.out.b", (self.cfg.data_dim,))
        return g.tanh(g.affine(h, w, b))

    def _graph(self, batch: int) -> tuple[Graph, int, int]:
        if batch not in self._graphs:
            g = Graph()
            x = g.input("gen_in", (batch, self.input_width))
            out = self.append_to_graph(g, x)
            self._graphs[batch] = (g, x, out)
        return self._graphs[batch]


def build_generator(cfg: NetConfig) -> GeneratorNet:
    """Fresh generator with deterministic initialization from cfg.seed."""
    net = GeneratorNet(cfg)
    net.init_params(np.random.default_rng(cfg.seed))
    return net


def generate(gen: GeneratorNet, codes: Codes) -> np.ndarray:
    """Run the generator on one batch of codes; returns (batch, d) in [-1, 1]."""
    x = codes.concat()
    if x.shape[1] != gen.input_width:
        raise ValueError(
            f"codes width {x.shape[1]} does not match generator input {gen.input_width}")
    g, _, out = gen._graph(x.shape[0])
    return forward(g, gen.store, {"gen_in": x})[out]


@dataclass(frozen=True)
class QPosterior:
    """Code posterior read off the recovery head for one batch."""

    cat_logits: list[np.ndarray]        # (batch, K_i) per categorical code
    cont_means: np.ndarray | None       # (batch, n_cont)


class CriticQNet:
    """Scalar critic and code-recovery head on one shared trunk."""

    def __init__(self, cfg: NetConfig, store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        self._graphs: dict[int, tuple] = {}

    @property
    def data_dim(self) -> int:
        return self.cfg.data_dim

    def init_params(self, rng: np.random.Generator) -> None:
        widths = [self.cfg.data_dim, *self.cfg.trunk_hidden]
        for i in range(len(widths) - 1):
            _init_affine(self.store, f"dis.h{i}", widths[i], widths[i + 1], rng)
        top = widths[-1]
        _init_affine(self.store, "dis.score", top, 1, rng)
        for i, k in enumerate(self.cfg.latent.categorical):
            _init_affine(self.store, f"q.cat{i}", top, k, rng)
        if self.cfg.latent.n_cont:
            _init_affine(self.store, "q.cont", top, self.cfg.latent.n_cont, rng)

    def critic_path_names(self) -> list[str]:
        """Trunk plus score head: everything updated on real data."""
        return self.store.names_with_prefix("dis.")

    def trunk_names(self) -> list[str]:
        return [n for n in self.store.params
                if n.startswith("dis.h")]

    def q_head_names(self) -> list[str]:
        return self.store.names_with_prefix("q.")

    def append_trunk(self, g: Graph, x: int) -> int:
        widths = [self.cfg.data_dim, *self.cfg.trunk_hidden]
        h = x
        for i in range(len(widths) - 1):
            w = g.param(f"dis.h{i}.W", (widths[i], widths[i + 1]))
            b = g.param(f"dis.h{i}.b", (widths[i + 1],))
            h = g.leaky_relu(g.affine(h, w, b))
        return h

    def append_score_head(self, g: Graph, trunk: int) -> int:
        top = self.cfg.trunk_hidden[-1] if self.cfg.trunk_hidden else self.cfg.data_dim
        w = g.param("dis.score.W", (top, 1))
        b = g.param("dis.score.b", (1,))
        return g.affine(trunk, w, b)

    def append_q_heads(self, g: Graph, trunk: int) -> tuple[list[int], int | None]:
        top = self.cfg.trunk_hidden[-1] if self.cfg.trunk_hidden else self.cfg.data_dim
        cat_nodes = []
        for i, k in enumerate(self.cfg.latent.categorical):
            w = g.param(f"q.cat{i}.W", (top, k))
            b = g.param(f"q.cat{i}.b", (k,))
            cat_nodes.append(g.affine(trunk, w, b))
        cont_node = None
        if self.cfg.latent.n_cont:
            w = g.param("q.cont.W", (top, self.cfg.latent.n_cont))
            b = g.param("q.cont.b", (self.cfg.latent.n_cont,))
            cont_node = g.affine(trunk, w, b)
        return cat_nodes, cont_node

    def _graph(self, batch: int):
        if batch not in self._graphs:
            g = Graph()
            x = g.input("x", (batch, self.cfg.data_dim))
            trunk = self.append_trunk(g, x)
            score = self.append_score_head(g, trunk)
            cat_nodes, cont_node = self.append_q_heads(g, trunk)
            self._graphs[batch] = (g, score, cat_nodes, cont_node)
        return self._graphs[batch]


def build_critic(cfg: NetConfig) -> CriticQNet:
    """Fresh critic/recovery net with deterministic initialization."""
    net = CriticQNet(cfg)
    net.init_params(np.random.default_rng(cfg.seed))
    return net


def critic_score(net: CriticQNet, x: np.ndarray) -> np.ndarray:
    """Unbounded scores, shape (batch, 1)."""
    x = as_tensor(x, where="critic input")
    if x.ndim != 2 or x.shape[1] != net.data_dim:
        raise ValueError(f"expected (batch, {net.data_dim}), got {x.shape}")
    g, score, _, _ = net._graph(x.shape[0])
    return forward(g, net.store, {"x": x})[score]


def q_posterior(net: CriticQNet, x: np.ndarray) -> QPosterior:
    """Recovery-head outputs: categorical logits and continuous means."""
    x = as_tensor(x, where="recovery input")
    if x.ndim != 2 or x.shape[1] != net.data_dim:
        raise ValueError(f"expected (batch, {net.data_dim}), got {x.shape}")
    g, _, cat_nodes, cont_node = net._graph(x.shape[0])
    acts = forward(g, net.store, {"x": x})
    return QPosterior(
        cat_logits=[acts[n] for n in cat_nodes],
        cont_means=acts[cont_node] if cont_node is not None else None)


# -- checkpoint serialization -----------------------------------------

@dataclass
class CheckpointBundle:
    gen: GeneratorNet
    critic: CriticQNet
    latent: LatentSpec
    privacy: PrivacySpec


def _spec_block(latent: LatentSpec, privacy: PrivacySpec) -> bytes:
    lines = []
    for line in latent.to_text().splitlines():
        lines.append(f"latent.{line}")
    for line in privacy.to_text().splitlines():
        lines.append(f"privacy.{line}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_spec_block(blob: bytes) -> tuple[LatentSpec, PrivacySpec]:
    latent_lines, privacy_lines = [], []
    for line in blob.decode("utf-8").splitlines():
        if line.startswith("latent."):
            latent_lines.append(line[len("latent."):])
        elif line.startswith("privacy."):
            privacy_lines.append(line[len("privacy."):])
        elif line.strip():
            raise CheckpointError(f"unknown spec line {line!r}")
    return (LatentSpec.from_text("\n".join(latent_lines)),
            PrivacySpec.from_text("\n".join(privacy_lines)))


def save_checkpoint(path, gen: GeneratorNet, critic: CriticQNet,
                    privacy: PrivacySpec) -> None:
    """Write both nets plus the latent/privacy spec echo; bit-exact payload."""
    params = dict(sorted(gen.store.params.items()))
    for name, arr in sorted(critic.store.params.items()):
        if name in params:
            raise CheckpointError(f"parameter name collision: {name!r}")
        params[name] = arr
    out = [struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params))]
    for name, arr in params.items():
        nameb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nameb)))
        out.append(nameb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = _spec_block(gen.cfg.latent, privacy)
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    with open(path, "wb") as f:
        f.write(b"".join(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint payload")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _widths_from_chain(params: dict[str, np.ndarray], prefix: str) -> list[int]:
    widths = []
    i = 0
    while f"{prefix}.h{i}.W" in params:
        widths.append(params[f"{prefix}.h{i}.W"].shape[1])
        i += 1
    return widths


def load_checkpoint(path) -> CheckpointBundle:
    """Rebuild the nets from a checkpoint; rejects foreign or corrupt files."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    magic, version, count = r.unpack("<4sII")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        if size > len(r.data):
            raise CheckpointError("shape table inconsistent with payload length")
        payload = r.take(8 * size)
        params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    (blen,) = r.unpack("<I")
    latent, privacy = _parse_spec_block(r.take(blen))
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after checkpoint payload")

    if "gen.out.W" not in params or "dis.score.W" not in params:
        raise CheckpointError("checkpoint missing network parameters")
    data_dim = params["gen.out.W"].shape[1]
    cfg = NetConfig(latent=latent, data_dim=data_dim,
                    gen_hidden=tuple(_widths_from_chain(params, "gen")),
                    trunk_hidden=tuple(_widths_from_chain(params, "dis")))
    gen = GeneratorNet(cfg)
    critic = CriticQNet(cfg)
    for name in sorted(params):
        target = gen.store if name.startswith("gen.") else critic.store
        target.add(name, params[name])
    expect_gen = set(build_generator(cfg).store.params)
    expect_critic = set(build_critic(cfg).store.params)
    if set(gen.store.params) != expect_gen or set(critic.store.params) != expect_critic:
        raise CheckpointError("parameter names inconsistent with architecture")
    for probe, want in ((gen, build_generator(cfg)), (critic, build_critic(cfg))):
        for name, arr in probe.store.params.items():
            if arr.shape != want.store.params[name].shape:
                raise CheckpointError(f"parameter {name!r} has unexpected shape")
    return CheckpointBundle(gen=gen, critic=critic, latent=latent, privacy=privacy)
