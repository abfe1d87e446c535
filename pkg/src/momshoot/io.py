"""Native binary formats.

Field file:  one UTF-8 header line
    MOMSHOOT-FIELD v1 dtype=f32 dims=<d1,d2[,d3]> channels=<1|d> boundary=<periodic|clamp>\n
followed by little-endian float32 payload in channel-major, last-axis-fastest
node order.

Batch file:  one UTF-8 header line
    MOMSHOOT-BATCH v1 dtype=f32 size=<s1,s2[,s3]> layers=<2|2+d> count=<n>\n
followed by the patches in origin order, same float encoding. layers = 2 is
inputs only (moving, target); layers = 2+d appends the d momentum targets.

Weight file:  line 1 `MOMSHOOT-NET v1`, line 2 the NetConfig as
`ndim=.. patch_size=.. features=f1,f2 convs_per_block=.. dropout_p=..`,
then per-layer little-endian float32 tensors in declaration order
(kernel, bias, PReLU slope where the layer has an activation).
"""

import numpy as np

from .errors import InvalidInputError
from .fields import (CLAMP, PERIODIC, DeformationMap, GridGeometry,
                     ScalarField, VectorField)
from .network import ConvLayer, NetConfig, NetworkWeights

FIELD_MAGIC = "MOMSHOOT-FIELD v1"
BATCH_MAGIC = "MOMSHOOT-BATCH v1"
NET_MAGIC = "MOMSHOOT-NET v1"


def _header_line(fh):
    line = bytearray()
    while True:
        ch = fh.read(1)
        if not ch:
            raise InvalidInputError("truncated header")
        if ch == b"\n":
            break
        line += ch
    return line.decode("utf-8")


def write_field(path, obj):
    if isinstance(obj, DeformationMap):
        obj = obj.displacement
    if isinstance(obj, ScalarField):
        channels = 1
        payload = obj.values[None]
    elif isinstance(obj, VectorField):
        channels = obj.geometry.ndim
        payload = obj.values
    else:
        raise InvalidInputError("cannot serialize %r as a field" % type(obj))
    geom = obj.geometry
    header = "%s dtype=f32 dims=%s channels=%d boundary=%s\n" % (
        FIELD_MAGIC, ",".join(str(n) for n in geom.dims), channels, geom.boundary)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def read_field(path):
    with open(path, "rb") as fh:
        header = _header_line(fh)
        parts = header.split()
        if " ".join(parts[:2]) != FIELD_MAGIC:
            raise InvalidInputError("not a field file: %s" % path)
        kv = dict(p.split("=", 1) for p in parts[2:])
        if kv.get("dtype") != "f32":
            raise InvalidInputError("unsupported dtype %r" % kv.get("dtype"))
        dims = tuple(int(n) for n in kv["dims"].split(","))
        channels = int(kv["channels"])
        boundary = kv["boundary"]
        if boundary not in (PERIODIC, CLAMP):
            raise InvalidInputError("bad boundary %r" % boundary)
        count = channels * int(np.prod(dims))
        raw = np.frombuffer(fh.read(4 * count), dtype="<f4")
        if raw.size != count:
            raise InvalidInputError("truncated field payload in %s" % path)
    geom = GridGeometry(dims, boundary=boundary)
    data = raw.astype(np.float64).reshape((channels,) + dims)
    if channels == 1:
        return ScalarField(geom, data[0])
    if channels != geom.ndim:
        raise InvalidInputError("channels=%d invalid for %dD grid"
                                % (channels, geom.ndim))
    return VectorField(geom, data)


def read_map(path):
    fld = read_field(path)
    if not isinstance(fld, VectorField):
        raise InvalidInputError("map file must hold a displacement vector field")
    return DeformationMap(fld.geometry, fld)


def write_batch(path, batch):
    d = batch.grid.geometry.ndim
    size = batch.grid.size
    layers = 2 + (d if batch.targets is not None else 0)
    n = batch.inputs.shape[0]
    header = "%s dtype=f32 size=%s layers=%d count=%d\n" % (
        BATCH_MAGIC, ",".join(str(s) for s in size), layers, n)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        for k in range(n):
            fh.write(np.ascontiguousarray(batch.inputs[k], dtype="<f4").tobytes())
            if batch.targets is not None:
                fh.write(np.ascontiguousarray(batch.targets[k],
                                              dtype="<f4").tobytes())


def read_batch(path):
    """Returns (inputs, targets-or-None, size)."""
    with open(path, "rb") as fh:
        header = _header_line(fh)
        parts = header.split()
        if " ".join(parts[:2]) != BATCH_MAGIC:
            raise InvalidInputError("not a batch file: %s" % path)
        kv = dict(p.split("=", 1) for p in parts[2:])
        size = tuple(int(s) for s in kv["size"].split(","))
        layers = int(kv["layers"])
        count = int(kv["count"])
        d = len(size)
        if layers not in (2, 2 + d):
            raise InvalidInputError("bad layer count %d" % layers)
        per = layers * int(np.prod(size))
        raw = np.frombuffer(fh.read(4 * per * count), dtype="<f4")
        if raw.size != per * count:
            raise InvalidInputError("truncated batch payload in %s" % path)
    data = raw.astype(np.float64).reshape((count, layers) + size)
    inputs = data[:, :2]
    targets = data[:, 2:] if layers > 2 else None
    return inputs, targets, size


def write_weights(path, weights):
    cfg = weights.config
    line = ("ndim=%d patch_size=%d features=%d,%d convs_per_block=%d "
            "dropout_p=%g\n") % (cfg.ndim, cfg.patch_size,
                                 cfg.encoder_features[0],
                                 cfg.encoder_features[1],
                                 cfg.convs_per_block, cfg.dropout_p)
    with open(path, "wb") as fh:
        fh.write((NET_MAGIC + "\n").encode("utf-8"))
        fh.write(line.encode("utf-8"))
        for p in weights.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def read_weights(path):
    with open(path, "rb") as fh:
        if _header_line(fh) != NET_MAGIC:
            raise InvalidInputError("not a weight file: %s" % path)
        kv = dict(p.split("=", 1) for p in _header_line(fh).split())
        cfg = NetConfig(
            ndim=int(kv["ndim"]),
            patch_size=int(kv["patch_size"]),
            encoder_features=tuple(int(f) for f in kv["features"].split(",")),
            convs_per_block=int(kv["convs_per_block"]),
            dropout_p=float(kv["dropout_p"]),
        )
        layers = []
        for cin, cout, act, _ in cfg.layer_channels():
            wshape = (cout, cin) + (3,) * cfg.ndim

            def tensor(shape):
                count = int(np.prod(shape))
                raw = np.frombuffer(fh.read(4 * count), dtype="<f4")
                if raw.size != count:
                    raise InvalidInputError("truncated weight file %s" % path)
                return raw.astype(np.float64).reshape(shape)

            w = tensor(wshape)
            b = tensor((cout,))
            slope = tensor((cout,)) if act else None
            layers.append(ConvLayer(w, b, slope))
    return NetworkWeights(cfg, layers)


# ---------------------------------------------------------------------------
# PGM import/export for 2D demos


def write_pgm(path, scalar):
    if scalar.geometry.ndim != 2:
        raise InvalidInputError("PGM export is 2D only")
    v = scalar.values
    lo, hi = float(v.min()), float(v.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.round((v - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def read_pgm(path, boundary=PERIODIC):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    if tokens[0] != b"P5":
        raise InvalidInputError("only binary (P5) PGM is supported")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    i += 1  # single whitespace after maxval
    raw = np.frombuffer(data[i:i + width * height], dtype=np.uint8)
    if raw.size != width * height:
        raise InvalidInputError("truncated PGM payload")
    geom = GridGeometry((height, width), boundary=boundary)
    return ScalarField(geom, raw.reshape(height, width) / float(maxval))
