# models.py
"""
Recurrent model zoo built on ``ndmath``.

Shapes follow the batch-first, row-vector convention: a batch of vectors is
``(B, n)``, weights are ``(n_in, n_out)``, biases ``(n_out,)``. A window is a
list of T tensors of shape ``(B, M)``.

LSTM (output gate peeks at the freshly updated cell):
    i  = sigmoid(x W_i + h_prev U_i + b_i)
    c~ = tanh(x W_c + h_prev U_c + b_c)
    f  = sigmoid(x W_f + h_prev U_f + b_f)
    c  = i * c~ + f * c_prev
    o  = sigmoid(x W_o + h_prev U_o + c V_o + b_o)
    h  = o * tanh(c)

Additive attention over annotations h_1..h_T with query d:
    e_t = tanh(h_t W_e + d U_e + b) v,  a = softmax(e),  C = sum_t a_t h_t

Head:
    h_s = tanh(C W_p + h_n W_x),  y = h_s W_s + b_s
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import ndmath as nd
from .config import ATTENTION_FAMILIES, ModelConfig
from .errors import ConfigError, DataError, ShapeError
from .ndmath import Tensor

logger = logging.getLogger("stemcast.models")


# ---------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------
def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def constant(value: float, *shape: int) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True)


class ParamSet:
    """Mixin for dataclasses whose fields are tensors, nested sets or lists of sets."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, ParamSet):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())


def _expect(t: Tensor, width: int, what: str) -> None:
    if t.data.ndim != 2 or t.shape[1] != width:
        raise ShapeError(f"{what} must be (batch, {width}), got {t.shape}")


# ---------------------------------------------------------
# LSTM
# ---------------------------------------------------------
@dataclass
class LstmParams(ParamSet):
    W_i: Tensor
    U_i: Tensor
    b_i: Tensor
    W_f: Tensor
    U_f: Tensor
    b_f: Tensor
    W_c: Tensor
    U_c: Tensor
    b_c: Tensor
    W_o: Tensor
    U_o: Tensor
    V_o: Tensor
    b_o: Tensor

    @property
    def input_size(self) -> int:
        return self.W_i.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.W_i.shape[1]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "LstmParams":
        """Glorot-uniform weights, forget bias 1, other biases 0."""
        def w():
            return glorot(rng, input_size, hidden_size)

        def u():
            return glorot(rng, hidden_size, hidden_size)

        return cls(
            W_i=w(), U_i=u(), b_i=zeros(hidden_size),
            W_f=w(), U_f=u(), b_f=constant(1.0, hidden_size),
            W_c=w(), U_c=u(), b_c=zeros(hidden_size),
            W_o=w(), U_o=u(), V_o=u(), b_o=zeros(hidden_size),
        )

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "LstmParams":
        n, m = hidden_size, input_size
        return cls(
            W_i=zeros(m, n), U_i=zeros(n, n), b_i=zeros(n),
            W_f=zeros(m, n), U_f=zeros(n, n), b_f=zeros(n),
            W_c=zeros(m, n), U_c=zeros(n, n), b_c=zeros(n),
            W_o=zeros(m, n), U_o=zeros(n, n), V_o=zeros(n, n), b_o=zeros(n),
        )


@dataclass
class LstmState:
    h: Tensor
    c: Tensor
    gates: Optional[Dict[str, Tensor]] = None


def zero_state(batch: int, hidden_size: int) -> LstmState:
    return LstmState(Tensor(np.zeros((batch, hidden_size))), Tensor(np.zeros((batch, hidden_size))))


def lstm_step(p: LstmParams, x_t: Tensor, prev: LstmState) -> LstmState:
    _expect(x_t, p.input_size, "LSTM input")
    _expect(prev.h, p.hidden_size, "LSTM hidden state")
    _expect(prev.c, p.hidden_size, "LSTM cell state")
    h_prev = prev.h
    i = nd.sigmoid(x_t @ p.W_i + h_prev @ p.U_i + p.b_i)
    c_tilde = nd.tanh(x_t @ p.W_c + h_prev @ p.U_c + p.b_c)
    f = nd.sigmoid(x_t @ p.W_f + h_prev @ p.U_f + p.b_f)
    c = i * c_tilde + f * prev.c
    o = nd.sigmoid(x_t @ p.W_o + h_prev @ p.U_o + c @ p.V_o + p.b_o)
    h = o * nd.tanh(c)
    return LstmState(h=h, c=c, gates={"i": i, "f": f, "o": o, "c_tilde": c_tilde})


def lstm_forward(p: LstmParams, sequence: Sequence[Tensor], init: Optional[LstmState] = None) -> List[LstmState]:
    if not sequence:
        raise ShapeError("lstm_forward needs at least one time step")
    state = init or zero_state(sequence[0].shape[0], p.hidden_size)
    states = []
    for x_t in sequence:
        state = lstm_step(p, x_t, state)
        states.append(state)
    return states


# ---------------------------------------------------------
# GRU
# ---------------------------------------------------------
@dataclass
class GruParams(ParamSet):
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    @property
    def input_size(self) -> int:
        return self.W_z.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.W_z.shape[1]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "GruParams":
        m, n = input_size, hidden_size
        return cls(
            W_z=glorot(rng, m, n), U_z=glorot(rng, n, n), b_z=zeros(n),
            W_r=glorot(rng, m, n), U_r=glorot(rng, n, n), b_r=zeros(n),
            W_h=glorot(rng, m, n), U_h=glorot(rng, n, n), b_h=zeros(n),
        )

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "GruParams":
        m, n = input_size, hidden_size
        return cls(
            W_z=zeros(m, n), U_z=zeros(n, n), b_z=zeros(n),
            W_r=zeros(m, n), U_r=zeros(n, n), b_r=zeros(n),
            W_h=zeros(m, n), U_h=zeros(n, n), b_h=zeros(n),
        )


def gru_step(p: GruParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    _expect(x_t, p.input_size, "GRU input")
    _expect(h_prev, p.hidden_size, "GRU hidden state")
    z = nd.sigmoid(x_t @ p.W_z + h_prev @ p.U_z + p.b_z)
    r = nd.sigmoid(x_t @ p.W_r + h_prev @ p.U_r + p.b_r)
    h_tilde = nd.tanh(x_t @ p.W_h + (r * h_prev) @ p.U_h + p.b_h)
    return h_prev - z * h_prev + z * h_tilde


def gru_forward(p: GruParams, sequence: Sequence[Tensor], h0: Optional[Tensor] = None) -> List[Tensor]:
    if not sequence:
        raise ShapeError("gru_forward needs at least one time step")
    h = h0 if h0 is not None else Tensor(np.zeros((sequence[0].shape[0], p.hidden_size)))
    hs = []
    for x_t in sequence:
        h = gru_step(p, x_t, h)
        hs.append(h)
    return hs


# ---------------------------------------------------------
# MLP
# ---------------------------------------------------------
@dataclass
class Dense(ParamSet):
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator) -> "Dense":
        return cls(glorot(rng, fan_in, fan_out), zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        _expect(x, self.W.shape[0], "Dense input")
        return x @ self.W + self.b


@dataclass
class MlpParams(ParamSet):
    layers: List[Dense]

    @property
    def input_size(self) -> int:
        return self.layers[0].W.shape[0]

    @classmethod
    def init(cls, input_size: int, hidden: Sequence[int], rng: np.random.Generator) -> "MlpParams":
        sizes = [input_size, *hidden, 1]
        return cls([Dense.init(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])])


def flatten_window(window: Sequence[Tensor]) -> Tensor:
    """(B, T*M), time-major, matching ``inputs.reshape(B, T*M)``."""
    return nd.concat(list(window), axis=1)


def mlp_forward(p: MlpParams, x: Tensor) -> Tensor:
    """tanh hidden layers, linear output of shape (B, 1)."""
    _expect(x, p.input_size, "MLP input")
    for layer in p.layers[:-1]:
        x = nd.tanh(layer(x))
    return p.layers[-1](x)


# ---------------------------------------------------------
# Encoder-decoder
# ---------------------------------------------------------
@dataclass
class EncoderDecoderParams(ParamSet):
    enc1: LstmParams
    enc2: LstmParams
    dec1: LstmParams
    dec2: LstmParams
    W_out: Tensor
    b_out: Tensor

    @property
    def input_size(self) -> int:
        return self.enc1.input_size

    @property
    def embedding_size(self) -> int:
        return self.enc2.hidden_size

    @classmethod
    def init(cls, input_size: int, sizes: Sequence[int], rng: np.random.Generator) -> "EncoderDecoderParams":
        outer, inner = sizes
        return cls(
            enc1=LstmParams.init(input_size, outer, rng),
            enc2=LstmParams.init(outer, inner, rng),
            dec1=LstmParams.init(inner, inner, rng),
            dec2=LstmParams.init(inner, outer, rng),
            W_out=glorot(rng, outer, input_size),
            b_out=zeros(input_size),
        )

    @classmethod
    def zeros(cls, input_size: int, sizes: Sequence[int]) -> "EncoderDecoderParams":
        outer, inner = sizes
        return cls(
            enc1=LstmParams.zeros(input_size, outer),
            enc2=LstmParams.zeros(outer, inner),
            dec1=LstmParams.zeros(inner, inner),
            dec2=LstmParams.zeros(inner, outer),
            W_out=zeros(outer, input_size),
            b_out=zeros(input_size),
        )


@dataclass
class Encoding:
    layer1: LstmState
    layer2: LstmState
    annotations: List[Tensor]

    @property
    def embedding(self) -> Tensor:
        return self.layer2.h


def encode(ed: EncoderDecoderParams, window: Sequence[Tensor]) -> Encoding:
    lower = lstm_forward(ed.enc1, window)
    upper = lstm_forward(ed.enc2, [s.h for s in lower])
    return Encoding(layer1=lower[-1], layer2=upper[-1], annotations=[s.h for s in upper])


def decode(ed: EncoderDecoderParams, encoding: Encoding, steps: int) -> List[Tensor]:
    """
    Unconditioned decoder: the embedding is fed at every step, states start
    from the encoder's final states (inner layer first). Output t
    reconstructs input step T-1-t.
    """
    if steps < 1:
        raise ShapeError("decode needs at least one step")
    inner = lstm_forward(ed.dec1, [encoding.embedding] * steps, init=encoding.layer2)
    outer = lstm_forward(ed.dec2, [s.h for s in inner], init=encoding.layer1)
    return [s.h @ ed.W_out + ed.b_out for s in outer]


def reconstruction_loss(ed: EncoderDecoderParams, window: Sequence[Tensor]) -> Tensor:
    """Mean squared error between the decoder output and the reversed window."""
    recon = decode(ed, encode(ed, window), len(window))
    terms = [nd.mean(nd.square(r - x)) for r, x in zip(recon, reversed(window))]
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss * (1.0 / len(terms))


# ---------------------------------------------------------
# Attention and head
# ---------------------------------------------------------
@dataclass
class AttentionParams(ParamSet):
    W_e: Tensor
    U_e: Tensor
    v: Tensor  # (n, 1)
    b: Tensor

    @property
    def size(self) -> int:
        return self.W_e.shape[0]

    @classmethod
    def init(cls, size: int, rng: np.random.Generator) -> "AttentionParams":
        return cls(glorot(rng, size, size), glorot(rng, size, size), glorot(rng, size, 1), zeros(size))


@dataclass
class AttentionState:
    scores: Tensor
    weights: Tensor
    context: Tensor


def attention_scores(ap: AttentionParams, annotations: Sequence[Tensor], d_prev: Tensor) -> Tensor:
    """(B, T) additive scores, one per annotation."""
    _expect(d_prev, ap.size, "attention query")
    query = d_prev @ ap.U_e + ap.b
    scores = []
    for h_t in annotations:
        _expect(h_t, ap.size, "annotation")
        scores.append(nd.tanh(h_t @ ap.W_e + query) @ ap.v)
    return nd.concat(scores, axis=1)


def attention_context(scores: Tensor, annotations: Sequence[Tensor]) -> AttentionState:
    if not annotations:
        raise ShapeError("attention over an empty annotation set")
    if scores.shape[1] != len(annotations):
        raise ShapeError(f"{scores.shape[1]} scores for {len(annotations)} annotations")
    weights = nd.softmax(scores, axis=1)
    context = nd.take(weights, 0, axis=1) * annotations[0]
    for t in range(1, len(annotations)):
        context = context + nd.take(weights, t, axis=1) * annotations[t]
    return AttentionState(scores=scores, weights=weights, context=context)


@dataclass
class HeadParams(ParamSet):
    W_p: Tensor
    W_x: Tensor
    W_s: Tensor
    b_s: Tensor

    @classmethod
    def init(cls, context_size: int, hidden_size: int, rng: np.random.Generator) -> "HeadParams":
        return cls(
            W_p=glorot(rng, context_size, hidden_size),
            W_x=glorot(rng, hidden_size, hidden_size),
            W_s=glorot(rng, hidden_size, 1),
            b_s=zeros(1),
        )


@dataclass
class LayerAttention(ParamSet):
    """Attention over the encoder's top-layer annotations, fed to the head via W_q."""

    attention: AttentionParams
    W_q: Tensor

    @classmethod
    def init(cls, annotation_size: int, head_size: int, rng: np.random.Generator) -> "LayerAttention":
        return cls(AttentionParams.init(annotation_size, rng), glorot(rng, annotation_size, head_size))


def predict_head(hp: HeadParams, context: Tensor, h_n: Tensor, extra: Optional[Tensor] = None) -> Tensor:
    _expect(context, hp.W_p.shape[0], "head context")
    _expect(h_n, hp.W_x.shape[0], "head hidden state")
    pre = context @ hp.W_p + h_n @ hp.W_x
    if extra is not None:
        pre = pre + extra
    return nd.tanh(pre) @ hp.W_s + hp.b_s


# ---------------------------------------------------------
# Forecasters
# ---------------------------------------------------------
def as_sequence(inputs: np.ndarray) -> List[Tensor]:
    """(B, T, M) array -> list of T tensors of shape (B, M)."""
    if inputs.ndim != 3:
        raise ShapeError(f"window batch must be (B, T, M), got {inputs.shape}")
    return [Tensor(inputs[:, t, :]) for t in range(inputs.shape[1])]


class Forecaster:
    """Shared plumbing: parameter access, snapshots and batched inference."""

    family: str = ""
    params: Optional[ParamSet] = None
    encoder_prefix: Optional[str] = None
    best_state: Optional[Dict[str, np.ndarray]] = None

    def __init__(self, architecture: Dict):
        self.architecture = dict(architecture, family=self.family)

    def parameters(self) -> Dict[str, Tensor]:
        return self.params.parameters() if self.params is not None else {}

    def trainable(self, freeze_encoder: bool = False) -> Dict[str, Tensor]:
        params = self.parameters()
        if freeze_encoder and self.encoder_prefix:
            params = {k: v for k, v in params.items() if not k.startswith(self.encoder_prefix)}
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) ^ set(state)
        if missing:
            raise DataError(f"Parameter names do not match the architecture: {sorted(missing)}")
        for name, p in params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise DataError(f"Parameter '{name}' has shape {values.shape}, expected {p.shape}")
            p.data[...] = values

    def forward(self, window: Sequence[Tensor]) -> Tensor:
        raise NotImplementedError

    def predict(self, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outputs = []
        for start in range(0, len(inputs), batch_size):
            outputs.append(self.forward(as_sequence(inputs[start : start + batch_size])).data[:, 0])
        return np.concatenate(outputs) if outputs else np.zeros(0)


@dataclass
class AttentionModelParams(ParamSet):
    ed: EncoderDecoderParams
    predictor: LstmParams
    head: HeadParams
    attention: Optional[AttentionParams] = None
    layer: Optional[LayerAttention] = None

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is not None:
                yield from value.named_parameters(f"{prefix}{f.name}.")


class AttentionForecaster(Forecaster):
    """Encoder -> predictor LSTM -> attention over predictor outputs -> head."""

    encoder_prefix = "ed."

    def __init__(self, architecture: Dict, params: AttentionModelParams, family: str):
        self.family = family
        super().__init__(architecture)
        self.params = params

    @property
    def use_attention(self) -> bool:
        return self.params.attention is not None

    @classmethod
    def build(cls, arch: Dict, rng: np.random.Generator) -> "AttentionForecaster":
        family = arch["family"]
        use_attention = family != "wt-ed-lstm"
        sizes = tuple(arch["encoder_sizes"])
        n = arch["predictor_hidden"]
        params = AttentionModelParams(
            ed=EncoderDecoderParams.init(arch["input_size"], sizes, rng),
            predictor=LstmParams.init(sizes[1], n, rng),
            head=HeadParams.init(n, n, rng),
            attention=AttentionParams.init(n, rng) if use_attention else None,
            layer=LayerAttention.init(sizes[1], n, rng) if arch.get("layer_attention") else None,
        )
        return cls(arch, params, family)

    def forward(self, window: Sequence[Tensor]) -> Tensor:
        return forward_full(self, window)


def forward_full(model: AttentionForecaster, window: Sequence[Tensor]) -> Tensor:
    """Assembled forecaster on a denoised, normalized window; returns (B, 1)."""
    p = model.params
    encoding = encode(p.ed, window)
    hs = [s.h for s in lstm_forward(p.predictor, encoding.annotations)]
    h_n = hs[-1]
    if p.attention is not None:
        context = attention_context(attention_scores(p.attention, hs, h_n), hs).context
    else:
        context = h_n
    extra = None
    if p.layer is not None:
        state = attention_context(
            attention_scores(p.layer.attention, encoding.annotations, encoding.embedding),
            encoding.annotations,
        )
        extra = state.context @ p.layer.W_q
    return predict_head(p.head, context, h_n, extra)


@dataclass
class RecurrentHeadParams(ParamSet):
    layers: List[ParamSet]
    out: Dense


class LstmForecaster(Forecaster):
    family = "lstm"

    def __init__(self, architecture: Dict, params: RecurrentHeadParams):
        super().__init__(architecture)
        self.params = params

    @classmethod
    def build(cls, arch: Dict, rng: np.random.Generator) -> "LstmForecaster":
        n = arch["predictor_hidden"]
        return cls(arch, RecurrentHeadParams([LstmParams.init(arch["input_size"], n, rng)], Dense.init(n, 1, rng)))

    def forward(self, window: Sequence[Tensor]) -> Tensor:
        return self.params.out(lstm_forward(self.params.layers[0], window)[-1].h)


class GruForecaster(Forecaster):
    family = "gru"

    def __init__(self, architecture: Dict, params: RecurrentHeadParams):
        super().__init__(architecture)
        self.params = params

    @classmethod
    def build(cls, arch: Dict, rng: np.random.Generator) -> "GruForecaster":
        first, second = arch["gru_sizes"]
        layers = [GruParams.init(arch["input_size"], first, rng), GruParams.init(first, second, rng)]
        return cls(arch, RecurrentHeadParams(layers, Dense.init(second, 1, rng)))

    def forward(self, window: Sequence[Tensor]) -> Tensor:
        hs = list(window)
        for layer in self.params.layers:
            hs = gru_forward(layer, hs)
        return self.params.out(hs[-1])


class MlpForecaster(Forecaster):
    family = "mlp"

    def __init__(self, architecture: Dict, params: MlpParams):
        super().__init__(architecture)
        self.params = params

    @classmethod
    def build(cls, arch: Dict, rng: np.random.Generator) -> "MlpForecaster":
        size = arch["window_length"] * arch["input_size"]
        return cls(arch, MlpParams.init(size, arch["mlp_hidden"], rng))

    def forward(self, window: Sequence[Tensor]) -> Tensor:
        return mlp_forward(self.params, flatten_window(window))


class PersistenceForecaster(Forecaster):
    """Last observed SDV as the forecast; no parameters."""

    family = "persistence"

    @classmethod
    def build(cls, arch: Dict, rng: np.random.Generator) -> "PersistenceForecaster":
        return cls(arch)

    def forward(self, window: Sequence[Tensor]) -> Tensor:
        return nd.take(window[-1], self.architecture["target_index"], axis=1)


_BUILDERS = {
    "lstm": LstmForecaster,
    "gru": GruForecaster,
    "mlp": MlpForecaster,
    "persistence": PersistenceForecaster,
    **{family: AttentionForecaster for family in ATTENTION_FAMILIES},
}


def architecture_for(config: ModelConfig, input_size: int, window_length: int) -> Dict:
    return {
        "family": config.family,
        "input_size": input_size,
        "window_length": window_length,
        "target_index": input_size - 1,
        "encoder_sizes": list(config.encoder_sizes),
        "predictor_hidden": config.predictor_hidden,
        "gru_sizes": list(config.gru_sizes),
        "mlp_hidden": list(config.mlp_hidden),
        "layer_attention": config.layer_attention,
        "peephole_cell": "post-update",
    }


def build_model(arch: Dict, seed: int) -> Forecaster:
    family = arch.get("family")
    if family not in _BUILDERS:
        raise ConfigError(f"Unknown architecture '{family}'")
    model = _BUILDERS[family].build(arch, np.random.default_rng(seed))
    logger.debug("Built %s with %d parameter tensors", family, len(model.parameters()))
    return model
