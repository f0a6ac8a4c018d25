"""Two-party encrypted fast gradient method.

The cloud holds encrypted step matrices and evaluates the gradient and
momentum updates on ciphertexts; the system holds the only secret key,
decrypts each gradient iterate, projects it onto the box and re-encrypts.

Packing (no slot rotations): a row block has width ``w = n + m + 1`` for
``n`` stacked inputs and ``m`` states. Row ``i`` of a matrix ciphertext stores
``(I - H/L)[i, :]`` in columns ``0..n-1``, ``(-F'/L)[i, :]`` in columns
``n..n+m-1`` and leaves the last column for the offset. Vector ciphertexts
repeat the vector in every row block, so one slotwise product followed by a
per-block sum on the system side yields the matrix-vector product. Rows are
split over several ciphertexts when ``n * w`` exceeds the slot count.
"""
from __future__ import annotations

import io
import json
import struct
from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from . import ckks
from .ckks import serialize as ser
from .mpc import CondensedQP, project_box


class ProtocolError(RuntimeError):
    """A protocol round failed; ``transcript`` holds the messages exchanged so far."""

    def __init__(self, message, transcript=None):
        super().__init__(message)
        self.transcript = transcript


# ---------------------------------------------------------------- packing

@dataclass(frozen=True)
class Packing:
    n: int
    m: int
    slots: int

    @property
    def width(self):
        return self.n + self.m + 1

    @property
    def rows_per_ct(self):
        r = min(self.slots // self.width, self.n)
        if r < 1:
            raise ValueError(f"row width {self.width} exceeds {self.slots} slots")
        return r

    @property
    def n_chunks(self):
        return -(-self.n // self.rows_per_ct)

    def chunk_rows(self, c):
        r = self.rows_per_ct
        return range(c * r, min((c + 1) * r, self.n))

    def tile_input(self, u):
        grid = np.zeros((self.rows_per_ct, self.width))
        grid[:, : self.n] = u
        return grid.ravel()

    def tile_state(self, x):
        grid = np.zeros((self.rows_per_ct, self.width))
        grid[:, self.n: self.n + self.m] = x
        return grid.ravel()

    def matrix_chunk(self, c, step, state):
        rows = list(self.chunk_rows(c))
        grid = np.zeros((self.rows_per_ct, self.width))
        grid[: len(rows), : self.n] = step[rows]
        grid[: len(rows), self.n: self.n + self.m] = state[rows]
        return grid.ravel()

    def offset_chunk(self, c, offset):
        rows = list(self.chunk_rows(c))
        grid = np.zeros((self.rows_per_ct, self.width))
        grid[: len(rows), -1] = offset[rows]
        return grid.ravel()

    def row_sums(self, chunks):
        out = []
        for c, vals in enumerate(chunks):
            grid = np.asarray(vals)[: self.rows_per_ct * self.width].reshape(self.rows_per_ct, self.width)
            out.append(grid.sum(axis=1)[: len(self.chunk_rows(c))])
        return np.concatenate(out)

    def input_slots(self, vals):
        return np.asarray(vals)[: self.n]


# ---------------------------------------------------------------- contexts

@dataclass(frozen=True)
class Scaling:
    """Affine change of units applied before encryption: ``x~ = (x - shift)/scale``, ``u~ = u/input_scale``."""

    shift: np.ndarray
    scale: np.ndarray
    input_scale: float = 1.0

    @classmethod
    def identity(cls, m):
        return cls(np.zeros(m), np.ones(m), 1.0)


@dataclass(frozen=True)
class CloudContext:
    packing: Packing
    params: ckks.HeParams
    public_key: ckks.PublicKey
    eval_key: ckks.EvalKey
    step_top: tuple  # per chunk, level L, scale delta
    step_low: tuple  # per chunk, level L-1, scale q_L
    momentum_plus: ckks.Ciphertext  # Enc(1 + eta)
    momentum_minus: ckks.Ciphertext  # Enc(-eta)
    offset: np.ndarray  # scaled condensed offset -(f + F' shift)/(L u_s), known to the cloud

    def __post_init__(self):
        for f in fields(self):
            if isinstance(getattr(self, f.name), ckks.SecretKey):
                raise TypeError("the cloud context cannot hold a secret key")


@dataclass
class SystemContext:
    packing: Packing
    secret_key: ckks.SecretKey
    public_key: ckks.PublicKey
    lower: np.ndarray  # box in scaled input units
    upper: np.ndarray
    scaling: Scaling
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def scaled_state(self, x):
        return (np.asarray(x, dtype=float) - self.scaling.shift) / self.scaling.scale

    def encrypt_input(self, u_scaled):
        return ckks.encrypt_values(self.public_key, self.packing.tile_input(u_scaled), rng=self.rng)

    def encrypt_state(self, x):
        return ckks.encrypt_values(self.public_key, self.packing.tile_state(self.scaled_state(x)), rng=self.rng)

    def decrypt_input(self, ct):
        return self.packing.input_slots(ckks.decrypt_values(self.secret_key, ct)) * self.scaling.input_scale


def scaled_offset(qp: CondensedQP, scaling: Scaling, offset=None):
    off = qp.offset if offset is None else np.asarray(offset, dtype=float)
    return -(off + qp.f @ scaling.shift) / (qp.lipschitz * scaling.input_scale)


def setup_protocol(qp: CondensedQP, params=None, seed=None, scaling: Scaling | None = None, keys=None):
    """Generate keys on the system side and provision the cloud with encrypted constants."""
    params = params or ckks.HeParams()
    m = qp.f.shape[1]
    scaling = scaling or Scaling.identity(m)
    rng = np.random.default_rng(seed)
    sk, pk, ek = keys if keys is not None else ckks.keygen(params, seed=rng.integers(2**63))
    packing = Packing(qp.size, m, params.slots)
    step = qp.step_matrix
    state = qp.state_matrix * scaling.scale[None, :] / scaling.input_scale
    top = params.max_level
    q_top = ckks.get_context(params).primes[top]
    step_top, step_low = [], []
    for c in range(packing.n_chunks):
        vals = packing.matrix_chunk(c, step, state)
        step_top.append(ckks.encrypt_values(pk, vals, rng=rng))
        # at the lower level the state columns pair with a mod-switched Enc(x) of scale delta,
        # the step columns with a momentum iterate of scale delta^2/q_top; split so both products land on delta^2
        low_step = packing.matrix_chunk(c, step, np.zeros_like(state))
        low_state = packing.matrix_chunk(c, np.zeros_like(step), state)
        a = ckks.encrypt_values(pk, low_step, scale=q_top, level=top - 1, rng=rng)
        b = ckks.encrypt_values(pk, low_state, scale=params.scale, level=top - 1, rng=rng)
        step_low.append((a, b))
    ones = np.ones(packing.rows_per_ct * packing.width)
    cc = CloudContext(
        packing, params, pk, ek, tuple(step_top), tuple(step_low),
        ckks.encrypt_values(pk, (1 + qp.eta) * ones, rng=rng),
        ckks.encrypt_values(pk, -qp.eta * ones, rng=rng),
        scaled_offset(qp, scaling),
    )
    sc = SystemContext(packing, sk, pk, qp.lower / scaling.input_scale, qp.upper / scaling.input_scale,
                       scaling, np.random.default_rng(rng.integers(2**63)))
    return cc, sc


# ---------------------------------------------------------------- party steps

def _encrypt_offset(cc: CloudContext, c, offset, level, scale):
    vals = cc.packing.offset_chunk(c, offset)
    return ckks.encrypt_values(cc.public_key, vals, scale=scale, level=level)


def cloud_gradient_step(cc: CloudContext, enc_xi, enc_x, offset=None):
    """Enc(d) per row chunk: Enc(I - H/L) * Enc(xi) + Enc(-F'/L) * Enc(x) + Enc(offset), rescaled."""
    off = cc.offset if offset is None else offset
    top = cc.params.max_level
    out = []
    try:
        for c in range(cc.packing.n_chunks):
            if enc_xi.level == top:
                # xi and x occupy disjoint columns at equal scale: one product covers both terms
                total = ckks.he_mult(cc.step_top[c], ckks.he_add(enc_xi, enc_x), cc.eval_key)
            else:
                a, b = cc.step_low[c]
                x_low = ckks.mod_switch(enc_x, enc_xi.level)
                total = ckks.he_add(ckks.he_mult(a, enc_xi, cc.eval_key), ckks.he_mult(b, x_low, cc.eval_key))
            total = ckks.he_add(total, _encrypt_offset(cc, c, off, total.level, total.scale))
            out.append(ckks.rescale(total))
    except ckks.LevelExhaustedError as exc:
        raise ProtocolError(f"gradient step: {exc}") from exc
    return out


def system_project_round(sc: SystemContext, enc_d):
    """Decrypt the gradient iterate, project onto the box and re-encrypt at full level."""
    d = sc.packing.row_sums([ckks.decrypt_values(sc.secret_key, ct) for ct in enc_d])
    if not np.all(np.isfinite(d)):
        raise ProtocolError("decryption produced non-finite values")
    u = project_box(d, sc.lower, sc.upper)
    return sc.encrypt_input(u), u


def cloud_momentum_step(cc: CloudContext, enc_u_next, enc_u_prev):
    """Enc(1 + eta) * Enc(u+) + Enc(-eta) * Enc(u), rescaled."""
    try:
        a = ckks.he_mult(cc.momentum_plus, enc_u_next, cc.eval_key)
        b = ckks.he_mult(cc.momentum_minus, enc_u_prev, cc.eval_key)
        return ckks.rescale(ckks.he_add(a, b))
    except ckks.LevelExhaustedError as exc:
        raise ProtocolError(f"momentum step: {exc}") from exc


# ---------------------------------------------------------------- wire format and transcript

SYSTEM_TO_CLOUD = 0
CLOUD_TO_SYSTEM = 1

KIND_INIT = 1  # Enc(x), Enc(u(0))
KIND_GRADIENT = 2  # Enc(d(k)) chunks
KIND_INPUT = 3  # Enc(u(k+1))
KIND_RESULT = 4  # Enc(u_t)
KIND_NAMES = {KIND_INIT: "init", KIND_GRADIENT: "gradient", KIND_INPUT: "input", KIND_RESULT: "result"}

MSG_MAGIC = b"EMSG"
MSG_VERSION = 1
MSG_HEADER = struct.Struct("<4sBBHHH")  # magic, version, direction, round, kind, item count
ITEM_LEN = struct.Struct("<I")


def encode_message(direction, rnd, kind, cts):
    """Length-prefixed frame: 12-byte header, then ``u32 length + ciphertext`` per item."""
    buf = io.BytesIO()
    buf.write(MSG_HEADER.pack(MSG_MAGIC, MSG_VERSION, direction, rnd, kind, len(cts)))
    for ct in cts:
        body = ser.dump_ciphertext(ct)
        buf.write(ITEM_LEN.pack(len(body)))
        buf.write(body)
    return buf.getvalue()


def decode_message(data, params):
    if len(data) < MSG_HEADER.size:
        raise ser.FormatError("truncated message header")
    magic, version, direction, rnd, kind, count = MSG_HEADER.unpack_from(data)
    if magic != MSG_MAGIC or version != MSG_VERSION:
        raise ser.FormatError("bad message magic or version")
    pos = MSG_HEADER.size
    cts = []
    for _ in range(count):
        (size,) = ITEM_LEN.unpack_from(data, pos)
        pos += ITEM_LEN.size
        cts.append(ser.load_ciphertext(data[pos:pos + size], params))
        pos += size
    if pos != len(data):
        raise ser.FormatError("trailing bytes after message items")
    return direction, rnd, kind, cts


@dataclass(frozen=True)
class MessageRecord:
    direction: int
    round: int
    kind: int
    n_bytes: int

    def as_dict(self):
        return {
            "direction": "system->cloud" if self.direction == SYSTEM_TO_CLOUD else "cloud->system",
            "round": self.round,
            "kind": KIND_NAMES[self.kind],
            "bytes": self.n_bytes,
        }


@dataclass
class ProtocolTranscript:
    iterations: int
    messages: list = field(default_factory=list)

    @property
    def total_bytes(self):
        return sum(m.n_bytes for m in self.messages)

    def to_jsonl(self):
        return "".join(json.dumps(m.as_dict()) + "\n" for m in self.messages)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


class DuplexChannel:
    """Ordered, loss-free in-process channel that records every frame."""

    def __init__(self, transcript: ProtocolTranscript):
        self.queues = {SYSTEM_TO_CLOUD: deque(), CLOUD_TO_SYSTEM: deque()}
        self.transcript = transcript

    def send(self, direction, rnd, kind, cts):
        frame = encode_message(direction, rnd, kind, cts)
        self.transcript.messages.append(MessageRecord(direction, rnd, kind, len(frame)))
        self.queues[direction].append(frame)

    def receive(self, direction, params):
        if not self.queues[direction]:
            raise ProtocolError("receive on an empty channel", self.transcript)
        return decode_message(self.queues[direction].popleft(), params)


def run_encrypted_fgm(cc: CloudContext, sc: SystemContext, x0, u_init, iterations, offset=None):
    """Run the message-passing protocol for ``iterations`` rounds.

    Returns ``(Enc(u_t), transcript, u_t)`` where ``u_t`` is the system's
    decryption of the final ciphertext, in original input units.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    transcript = ProtocolTranscript(iterations)
    chan = DuplexChannel(transcript)
    params = cc.params
    off = None if offset is None else np.asarray(offset, dtype=float)
    try:
        u0 = np.asarray(u_init, dtype=float) / sc.scaling.input_scale
        chan.send(SYSTEM_TO_CLOUD, 0, KIND_INIT, [sc.encrypt_state(x0), sc.encrypt_input(u0)])

        _, _, _, (enc_x, enc_u) = chan.receive(SYSTEM_TO_CLOUD, params)
        enc_xi = enc_u
        for k in range(iterations):
            chan.send(CLOUD_TO_SYSTEM, k, KIND_GRADIENT, cloud_gradient_step(cc, enc_xi, enc_x, off))
            _, _, _, enc_d = chan.receive(CLOUD_TO_SYSTEM, params)
            enc_next, _ = system_project_round(sc, enc_d)
            chan.send(SYSTEM_TO_CLOUD, k, KIND_INPUT, [enc_next])
            _, _, _, (enc_next,) = chan.receive(SYSTEM_TO_CLOUD, params)
            if k + 1 < iterations:
                enc_xi = cloud_momentum_step(cc, enc_next, enc_u)
            enc_u = enc_next
        chan.send(CLOUD_TO_SYSTEM, iterations, KIND_RESULT, [enc_u])
        _, _, _, (result,) = chan.receive(CLOUD_TO_SYSTEM, params)
        u = sc.decrypt_input(result)
    except ProtocolError as exc:
        exc.transcript = transcript
        raise
    except (ValueError, ser.FormatError) as exc:
        raise ProtocolError(str(exc), transcript) from exc
    return result, transcript, u


def dump_cloud_context(cc: CloudContext) -> bytes:
    """Serialize every key and ciphertext the cloud holds (length-prefixed objects)."""
    objs = [ser.dump_public_key(cc.public_key), ser.dump_eval_key(cc.eval_key)]
    objs += [ser.dump_ciphertext(ct) for ct in cc.step_top]
    objs += [ser.dump_ciphertext(ct) for pair in cc.step_low for ct in pair]
    objs += [ser.dump_ciphertext(cc.momentum_plus), ser.dump_ciphertext(cc.momentum_minus)]
    objs.append(np.asarray(cc.offset, dtype="<f8").tobytes())
    return b"".join(ITEM_LEN.pack(len(o)) + o for o in objs)


def iter_serialized_kinds(blob: bytes):
    """Yield the object-kind byte of each serialized HE object in a context dump."""
    pos = 0
    while pos < len(blob):
        (size,) = ITEM_LEN.unpack_from(blob, pos)
        pos += ITEM_LEN.size
        item = blob[pos:pos + size]
        if item[:4] == ser.MAGIC:
            yield ser.HEADER.unpack_from(item)[2]
        pos += size
