"""Binary checkpoint: header, named float64 arrays in fixed order, checksum.

Layout (all little-endian):
  magic          4 bytes  b"IVGN"
  version        u32
  D, M, E, L, B, n_o, hidden_dim   u32 each (zeros in partial checkpoints
                                   where the model is absent)
  dt, eps        f64 each
  n_arrays       u32
  per array:     name (u16 length + utf-8), ndim u8, dims u32 each, f64 data
  checksum       8 bytes, first half of sha256 over all array bytes

Array order: transform dates and constants (equity tickers are embedded in
the array names), basis members, FPCA mean/C/eigenvalues/explained, the
training state series, normalization stats, then drift and diffusion net
parameters. Net arrays are omitted in partial (pre-training) checkpoints.
"""

from __future__ import annotations

import datetime
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .basis import enumerate_basis
from .errors import DataError
from .fpca import FpcaModel, FpccSeries, split_states
from .market_data import EquityTransform, TransformSpec
from .nsde import NsdeModel, RecurrentNet

MAGIC = b"IVGN"
VERSION = 1
_EPOCH = datetime.date(1970, 1, 1)


@dataclass(frozen=True)
class CheckpointBundle:
    """Everything a downstream command needs: transforms, FPCA, series, model."""

    transforms: TransformSpec
    fpca: FpcaModel
    series: FpccSeries
    model: NsdeModel = None  # None in partial checkpoints

    @property
    def is_partial(self) -> bool:
        return self.model is None


def _date_array(dates) -> np.ndarray:
    return np.array([(d - _EPOCH).days for d in dates], dtype=float)


def _dates_from_array(arr) -> tuple:
    return tuple(_EPOCH + datetime.timedelta(days=int(v)) for v in arr)


def _collect_arrays(bundle: CheckpointBundle) -> list:
    tr = bundle.transforms
    fp = bundle.fpca
    arrays = [
        ("transforms.dates", _date_array(tr.dates)),
        ("transforms.tau_max", np.array([tr.tau_max])),
    ]
    for e, t in tr.per_equity.items():
        arrays.append(
            (
                f"transforms.{e}",
                np.array(
                    [t.iv_c0, t.iv_c1, t.price_c0, t.price_c1, t.detrend_beta0, t.detrend_beta1]
                ),
            )
        )
    arrays += [
        ("basis.members", np.array(fp.basis.members, dtype=float)),
        ("fpca.mean", fp.mean_coeffs),
        ("fpca.C", fp.C),
        ("fpca.eigenvalues", fp.eigenvalues),
        ("fpca.explained", fp.explained),
        ("series.states", bundle.series.states()),
    ]
    if bundle.model is not None:
        m = bundle.model
        arrays += [("norm.center", m.norm_center), ("norm.scale", m.norm_scale)]
        arrays += m.drift_net.named_arrays("drift.")
        arrays += m.diff_net.named_arrays("diff.")
    return arrays


def save_checkpoint(path, bundle: CheckpointBundle) -> None:
    arrays = _collect_arrays(bundle)
    m = bundle.model
    header = struct.pack(
        "<7I",
        m.state_dim if m else 0,
        bundle.fpca.M,
        len(bundle.transforms.per_equity),
        m.lag if m else 0,
        bundle.fpca.basis.size,
        bundle.fpca.basis.order_cap,
        m.drift_net.hidden_dim if m else 0,
    ) + struct.pack("<2d", m.dt if m else 0.0, m.eps if m else 0.0)

    digest = hashlib.sha256()
    chunks = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunk = struct.pack("<H", len(encoded)) + encoded
        chunk += struct.pack("<B", arr.ndim)
        chunk += struct.pack(f"<{arr.ndim}I", *arr.shape)
        data = arr.tobytes()
        chunk += data
        digest.update(data)
        chunks.append(chunk)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(header)
        fh.write(struct.pack("<I", len(arrays)))
        for chunk in chunks:
            fh.write(chunk)
        fh.write(digest.digest()[:8])


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise DataError("checkpoint truncated")
        out = raw[off : off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise DataError("not an IVGN checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise DataError(
            f"checkpoint format version {version} unsupported (expected {VERSION})"
        )
    d_dim, m_comp, n_eq, lag, b_size, n_o, hidden = struct.unpack("<7I", take(28))
    dt, eps = struct.unpack("<2d", take(16))
    (n_arrays,) = struct.unpack("<I", take(4))

    digest = hashlib.sha256()
    arrays = {}
    order = []
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = take(8 * count)
        digest.update(data)
        arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        order.append(name)
    checksum = take(8)
    if checksum != digest.digest()[:8]:
        raise DataError("checkpoint checksum mismatch; file is corrupted")

    dates = _dates_from_array(arrays["transforms.dates"])
    tau_max = float(arrays["transforms.tau_max"][0])
    per_equity = {}
    for name in order:
        if name.startswith("transforms.") and name not in ("transforms.dates", "transforms.tau_max"):
            e = name[len("transforms.") :]
            v = arrays[name]
            per_equity[e] = EquityTransform(
                iv_c0=v[0], iv_c1=v[1], price_c0=v[2], price_c1=v[3],
                detrend_beta0=v[4], detrend_beta1=v[5],
            )
    transforms = TransformSpec(per_equity=per_equity, tau_max=tau_max, dates=dates)

    basis = enumerate_basis(n_o)
    if basis.size != b_size:
        raise DataError("basis size in header does not match order cap")
    members = [tuple(int(v) for v in row) for row in arrays["basis.members"]]
    if tuple(members) != basis.members:
        raise DataError("basis enumeration in checkpoint does not match the canonical order")
    eigenvalues = arrays["fpca.eigenvalues"]
    fpca = FpcaModel(
        basis=basis,
        mean_coeffs=arrays["fpca.mean"],
        C=arrays["fpca.C"],
        eigenvalues=eigenvalues,
        explained=arrays["fpca.explained"],
        M=eigenvalues.size,
    )

    states = arrays["series.states"]
    fpcc, prices = split_states(states, len(per_equity), fpca.M)
    series = FpccSeries(
        dates=dates, equities=tuple(per_equity), fpcc=fpcc, prices=prices
    )

    model = None
    if any(name.startswith("drift.") for name in order):
        drift = _net_from_arrays(arrays, "drift.", states.shape[1], hidden, states.shape[1])
        diff = _net_from_arrays(
            arrays, "diff.", states.shape[1], hidden, states.shape[1] * (states.shape[1] + 1) // 2
        )
        model = NsdeModel(
            drift_net=drift,
            diff_net=diff,
            lag=lag,
            dt=dt,
            eps=eps,
            norm_center=arrays["norm.center"],
            norm_scale=arrays["norm.scale"],
        )
        if model.state_dim != d_dim:
            raise DataError("state dimension in header does not match arrays")
    return CheckpointBundle(transforms=transforms, fpca=fpca, series=series, model=model)


def _net_from_arrays(arrays, prefix, input_dim, hidden_dim, output_dim, n_layers=3) -> RecurrentNet:
    layers = []
    for li in range(n_layers):
        layer = {}
        for key in ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_c", "U_c", "b_c"):
            name = f"{prefix}l{li}.{key}"
            if name not in arrays:
                raise DataError(f"checkpoint missing net array {name}")
            layer[key] = arrays[name]
        layers.append(layer)
    head = {"W_o": arrays[f"{prefix}head.W_o"], "b_o": arrays[f"{prefix}head.b_o"]}
    return RecurrentNet(
        input_dim=input_dim,
        hidden_dim=hidden_dim,
        output_dim=output_dim,
        layers=layers,
        head=head,
    )
