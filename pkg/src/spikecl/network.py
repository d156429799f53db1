"""Expandable layered spiking network with per-task neuron populations.

Each layer owns one dense weight array covering every unit ever created.
Per-task subnetworks are expressed as masks:

* ``exist``   -- which synapses physically exist (an old unit never gains
  input synapses, so its row only covers columns that existed when its task
  was trained);
* ``trainable`` -- which entries the optimizer may touch (rows of the
  current task's populations only);
* ``TaskMask``  -- per-task active units and connection bits; pruning clears
  bits here and never touches other tasks' masks.

Convolutional layers treat a channel as one unit; connection bits between a
conv layer and the following dense layer are kept at channel level and
expanded to the flattened column block when applied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, FormatError, ShapeError
from .spiking import LIFConfig, SpikeState, lif_step, run_window
from .tensor import Tensor, conv2d, no_grad

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class DenseSpec:
    units: int


@dataclass
class NeuronPopulation:
    task_id: int
    layer: int
    start: int
    stop: int  # exclusive

    @property
    def size(self):
        return self.stop - self.start

    def units(self):
        return range(self.start, self.stop)


class Layer:
    def __init__(self, kind, spec, w, b, block=1):
        self.kind = kind  # "conv" | "dense"
        self.spec = spec
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)
        self.block = block  # columns per input unit (H*W at conv->dense seam)
        self.trainable_w = np.ones(self.w.shape, dtype=bool)
        self.trainable_b = np.ones(self.b.shape, dtype=bool)
        self.exist = np.ones((self.width, self.in_units), dtype=bool)
        self.populations = []

    @property
    def width(self):
        return self.w.shape[0]

    @property
    def in_units(self):
        if self.kind == "conv":
            return self.w.shape[1]
        return self.w.shape[1] // self.block

    def frozen_units(self, task_id):
        """Units belonging to populations older than ``task_id``."""
        out = []
        for pop in self.populations:
            if pop.task_id < task_id:
                out.extend(pop.units())
        return out


class TaskMask:
    def __init__(self, task_id, active, conn, head_active):
        self.task_id = task_id
        self.active = active  # list of bool (width,) per layer
        self.conn = conn  # list of bool (width, in_units) per layer
        self.head_active = head_active  # bool (final width,)

    def copy(self):
        return TaskMask(
            self.task_id,
            [a.copy() for a in self.active],
            [c.copy() for c in self.conn],
            self.head_active.copy(),
        )


class TaskHead:
    def __init__(self, task_id, classes, w, b):
        self.task_id = task_id
        self.classes = list(classes)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)
        # CIL inference uses calibrated copies so the TIL head stays frozen.
        self.cil_w = Tensor(w.copy(), requires_grad=True)
        self.cil_b = Tensor(b.copy(), requires_grad=True)

    def sync_cil(self):
        self.cil_w = Tensor(self.w.data.copy(), requires_grad=True)
        self.cil_b = Tensor(self.b.data.copy(), requires_grad=True)


def _he_init(rng, shape, fan_in):
    std = np.sqrt(2.0 / max(fan_in, 1))
    return rng.normal(0.0, std, size=shape)


class Network:
    """The expandable SNN plus all per-task bookkeeping."""

    def __init__(self, arch, input_shape, lif, seed):
        if not arch:
            raise ConfigError("architecture must list at least one layer")
        if not isinstance(arch[-1], DenseSpec):
            raise ConfigError("final feature layer must be dense")
        for spec in arch:
            n = spec.channels if isinstance(spec, ConvSpec) else spec.units
            if n <= 0:
                raise ConfigError(f"layer sizes must be positive, got {n}")
        seen_dense = False
        for spec in arch:
            if isinstance(spec, DenseSpec):
                seen_dense = True
            elif seen_dense:
                raise ConfigError("conv layers must precede dense layers")
        self.arch = list(arch)
        self.input_shape = tuple(input_shape)
        self.lif = lif
        self.seed = int(seed)
        self.layers = []
        self.masks = {}
        self.heads = {}
        self.anchors = {}  # task_id -> {class: mean feature vector}
        self.current_task = None
        self._spatial = self._spatial_dims()

    # -- construction --------------------------------------------------------

    def _spatial_dims(self):
        """(H, W) after each conv layer; fixed because expansion is by channel."""
        from .tensor import _conv_geometry

        dims = []
        h, w = self.input_shape[1], self.input_shape[2]
        for spec in self.arch:
            if isinstance(spec, ConvSpec):
                h, w = _conv_geometry(h, w, spec.kernel, spec.kernel,
                                      spec.stride, spec.padding)
            dims.append((h, w))
        return dims

    def _init_layers(self, task0):
        rng = np.random.default_rng([self.seed, 0])
        prev_units = self.input_shape[0]
        prev_kind = "conv"
        for li, spec in enumerate(self.arch):
            if isinstance(spec, ConvSpec):
                k = spec.kernel
                w = _he_init(rng, (spec.channels, prev_units, k, k),
                             prev_units * k * k)
                layer = Layer("conv", spec, w, np.zeros(spec.channels))
                prev_units = spec.channels
                prev_kind = "conv"
            else:
                block = 1
                if prev_kind == "conv":
                    h, wd = self._spatial[li - 1] if li else (self.input_shape[1],
                                                             self.input_shape[2])
                    block = h * wd
                in_cols = prev_units * block
                w = _he_init(rng, (spec.units, in_cols), in_cols)
                layer = Layer("dense", spec, w, np.zeros(spec.units), block=block)
                prev_units = spec.units
                prev_kind = "dense"
            layer.populations.append(NeuronPopulation(task0.id, li, 0, layer.width))
            self.layers.append(layer)
        self.masks[task0.id] = TaskMask(
            task0.id,
            [np.ones(l.width, dtype=bool) for l in self.layers],
            [l.exist.copy() for l in self.layers],
            np.ones(self.layers[-1].width, dtype=bool),
        )
        feat = self.layers[-1].width
        self.heads[task0.id] = TaskHead(
            task0.id, task0.classes,
            _he_init(rng, (len(task0.classes), feat), feat),
            np.zeros(len(task0.classes)),
        )
        self.current_task = task0.id

    def expand(self, task, counts):
        """Add one population per layer for ``task`` and open its mask."""
        if task.id in self.masks:
            raise ContractError(f"task {task.id} already present")
        if len(counts) != len(self.layers):
            raise ContractError(
                f"expected {len(self.layers)} expansion counts, got {len(counts)}"
            )
        rng = np.random.default_rng([self.seed, task.id])
        prev_new = 0  # input channels never grow
        for li, layer in enumerate(self.layers):
            n_new = int(counts[li])
            if n_new < 0:
                raise ContractError("expansion counts must be non-negative")
            old_out, old_in = layer.width, layer.in_units
            new_in = old_in + prev_new
            # freeze everything that existed before this task
            layer.trainable_w[...] = False
            layer.trainable_b[...] = False
            if layer.kind == "conv":
                k = layer.spec.kernel
                w = np.zeros((old_out + n_new, new_in, k, k))
                w[:old_out, :old_in] = layer.w.data
                if n_new:
                    w[old_out:] = _he_init(rng, (n_new, new_in, k, k),
                                           new_in * k * k)
                tw = np.zeros(w.shape, dtype=bool)
                tw[old_out:] = True
            else:
                blk = layer.block
                w = np.zeros((old_out + n_new, new_in * blk))
                w[:old_out, : old_in * blk] = layer.w.data
                if n_new:
                    w[old_out:] = _he_init(rng, (n_new, new_in * blk),
                                           new_in * blk)
                tw = np.zeros(w.shape, dtype=bool)
                tw[old_out:] = True
            b = np.concatenate([layer.b.data, np.zeros(n_new)])
            tb = np.zeros(b.shape, dtype=bool)
            tb[old_out:] = True
            exist = np.zeros((old_out + n_new, new_in), dtype=bool)
            exist[:old_out, :old_in] = layer.exist
            exist[old_out:] = True  # new units fully connected to layer l-1
            layer.w = Tensor(w, requires_grad=True)
            layer.b = Tensor(b, requires_grad=True)
            layer.trainable_w, layer.trainable_b, layer.exist = tw, tb, exist
            layer.populations.append(
                NeuronPopulation(task.id, li, old_out, old_out + n_new)
            )
            prev_new = n_new
        # pad stored masks with inactive bits for the new units
        for mask in self.masks.values():
            for li, layer in enumerate(self.layers):
                a = np.zeros(layer.width, dtype=bool)
                a[: mask.active[li].size] = mask.active[li]
                c = np.zeros((layer.width, layer.in_units), dtype=bool)
                c[: mask.conn[li].shape[0], : mask.conn[li].shape[1]] = mask.conn[li]
                mask.active[li], mask.conn[li] = a, c
            ha = np.zeros(self.layers[-1].width, dtype=bool)
            ha[: mask.head_active.size] = mask.head_active
            mask.head_active = ha
        feat = self.layers[-1].width
        for head in self.heads.values():
            w = np.zeros((head.w.shape[0], feat))
            w[:, : head.w.shape[1]] = head.w.data
            head.w = Tensor(w, requires_grad=True)
            cw = np.zeros((head.cil_w.shape[0], feat))
            cw[:, : head.cil_w.shape[1]] = head.cil_w.data
            head.cil_w = Tensor(cw, requires_grad=True)
        self.masks[task.id] = TaskMask(
            task.id,
            [np.ones(l.width, dtype=bool) for l in self.layers],
            [l.exist.copy() for l in self.layers],
            np.ones(feat, dtype=bool),
        )
        self.heads[task.id] = TaskHead(
            task.id, task.classes,
            _he_init(rng, (len(task.classes), feat), feat),
            np.zeros(len(task.classes)),
        )
        self.current_task = task.id

    # -- forward -------------------------------------------------------------

    def _require_mask(self, task_id):
        if task_id not in self.masks:
            raise KeyError(f"unknown task {task_id}")
        return self.masks[task_id]

    def step_fn(self, task_id, cfg=None):
        """Single-timestep closure over the feature layers for ``task_id``."""
        mask = self._require_mask(task_id)
        cfg = cfg or self.lif

        def step(x, states):
            if states is None:
                b = x.shape[0]
                states = []
                for li, layer in enumerate(self.layers):
                    if layer.kind == "conv":
                        h, w = self._spatial[li]
                        states.append(SpikeState.zeros((b, layer.width, h, w)))
                    else:
                        states.append(SpikeState.zeros((b, layer.width)))
            h = x
            new_states = []
            prev_kind = "conv"
            for li, layer in enumerate(self.layers):
                if layer.kind == "conv":
                    weff = layer.w.mask_mul(mask.conn[li][:, :, None, None])
                    cur = conv2d(h, weff, layer.spec.stride, layer.spec.padding)
                    cur = cur.add_bias(layer.b)
                    cur = cur.mask_mul(mask.active[li].reshape(1, -1, 1, 1))
                else:
                    if prev_kind == "conv":
                        h = h.reshape(h.shape[0], -1)
                    cols = np.repeat(mask.conn[li], layer.block, axis=1)
                    weff = layer.w.mask_mul(cols)
                    cur = h.matmul(weff.transpose()).add_bias(layer.b)
                    cur = cur.mask_mul(mask.active[li].reshape(1, -1))
                state = lif_step(states[li], cur, cfg)
                new_states.append(state)
                h = state.spikes
                prev_kind = layer.kind
            return h, new_states

        return step

    def features_tensor(self, x, task_id, cfg=None):
        """Rate-coded final feature-layer output over the window (graph-recording)."""
        cfg = cfg or self.lif
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.data.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match network input "
                f"{self.input_shape}"
            )
        return run_window(self.step_fn(task_id, cfg), x, cfg)

    def head_logits(self, features, task_id, cil=False):
        mask = self._require_mask(task_id)
        head = self.heads[task_id]
        w = head.cil_w if cil else head.w
        b = head.cil_b if cil else head.b
        weff = w.mask_mul(mask.head_active[None, :])
        return features.matmul(weff.transpose()).add_bias(b)

    def forward_task(self, x, task_id, cfg=None):
        """Masked forward; returns (logits over the task's classes, features)."""
        features = self.features_tensor(x, task_id, cfg)
        return self.head_logits(features, task_id), features

    def extract_features(self, x, task_id, cfg=None):
        """Features under an old task's mask, no gradient recording."""
        with no_grad():
            return self.features_tensor(x, task_id, cfg).data

    def parameters(self, task_id):
        """Trainable parameter tensors while learning ``task_id``."""
        head = self.heads[task_id]
        params = [head.w, head.b]
        for layer in self.layers:
            params.extend([layer.w, layer.b])
        return params

    # -- pruning -------------------------------------------------------------

    def _unit_task(self, layer_index, unit):
        for pop in self.layers[layer_index].populations:
            if pop.start <= unit < pop.stop:
                return pop.task_id
        raise KeyError(f"unit {unit} out of range in layer {layer_index}")

    def prune_units(self, task_id, doomed):
        """Disconnect old units from ``task_id``'s subnetwork entirely.

        ``doomed`` is an iterable of (layer_index, unit_index).  Old tasks'
        masks are untouched; the unit's own pathway under its original task
        stays intact.
        """
        mask = self._require_mask(task_id)
        for li, u in doomed:
            if self._unit_task(li, u) == task_id:
                raise ContractError(
                    f"cannot prune unit {u} of layer {li}: it belongs to the "
                    f"current task {task_id}"
                )
            mask.active[li][u] = False
            mask.conn[li][u, :] = False
            if li + 1 < len(self.layers):
                mask.conn[li + 1][:, u] = False
            if li == len(self.layers) - 1:
                mask.head_active[u] = False

    def prune_connections(self, task_id, edges):
        """Clear individual connection bits toward ``task_id``'s populations.

        Each edge is (dst_layer, dst_unit, src_unit); ``dst_layer`` may be the
        string "head" with ``dst_unit`` ignored.  Old units left with no
        outgoing bits are deactivated (cascading upstream).
        """
        mask = self._require_mask(task_id)
        for edge in edges:
            dst_layer, dst_unit, src_unit = edge
            if dst_layer == "head":
                mask.head_active[src_unit] = False
                continue
            if self._unit_task(dst_layer, dst_unit) != task_id:
                raise ContractError(
                    f"edge into layer {dst_layer} unit {dst_unit} does not "
                    f"target task {task_id}'s populations"
                )
            mask.conn[dst_layer][dst_unit, src_unit] = False
        self._deactivate_orphans(task_id)

    def _deactivate_orphans(self, task_id):
        """Old units with no outgoing bits in the mask become inactive."""
        mask = self.masks[task_id]
        changed = True
        while changed:
            changed = False
            for li, layer in enumerate(self.layers):
                last = li == len(self.layers) - 1
                for u in layer.frozen_units(task_id):
                    if not mask.active[li][u]:
                        continue
                    has_out = (
                        bool(mask.head_active[u]) if last
                        else bool(mask.conn[li + 1][:, u].any())
                    )
                    if not has_out:
                        self.prune_units(task_id, [(li, u)])
                        changed = True

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        meta = {
            "version": FORMAT_VERSION,
            "seed": self.seed,
            "input_shape": list(self.input_shape),
            "current_task": self.current_task,
            "lif": {
                "tau": self.lif.tau, "v_th": self.lif.v_th, "lam": self.lif.lam,
                "window": self.lif.window, "reset_mode": self.lif.reset_mode,
            },
            "arch": [
                {"kind": "conv", "channels": s.channels, "kernel": s.kernel,
                 "stride": s.stride, "padding": s.padding}
                if isinstance(s, ConvSpec) else {"kind": "dense", "units": s.units}
                for s in self.arch
            ],
            "populations": [
                [p.task_id, p.layer, p.start, p.stop]
                for layer in self.layers for p in layer.populations
            ],
            "tasks": {
                str(t): {"classes": self.heads[t].classes} for t in self.masks
            },
            "anchor_classes": {
                str(t): sorted(self.anchors[t]) for t in self.anchors
            },
        }
        arrays = {"__meta__": np.frombuffer(
            json.dumps(meta).encode(), dtype=np.uint8)}
        for li, layer in enumerate(self.layers):
            arrays[f"layer{li}/w"] = layer.w.data
            arrays[f"layer{li}/b"] = layer.b.data
            arrays[f"layer{li}/trainable_w"] = layer.trainable_w
            arrays[f"layer{li}/trainable_b"] = layer.trainable_b
            arrays[f"layer{li}/exist"] = layer.exist
        for t, mask in self.masks.items():
            for li in range(len(self.layers)):
                arrays[f"task{t}/active{li}"] = mask.active[li]
                arrays[f"task{t}/conn{li}"] = mask.conn[li]
            arrays[f"task{t}/head_active"] = mask.head_active
            head = self.heads[t]
            arrays[f"task{t}/head_w"] = head.w.data
            arrays[f"task{t}/head_b"] = head.b.data
            arrays[f"task{t}/cil_w"] = head.cil_w.data
            arrays[f"task{t}/cil_b"] = head.cil_b.data
        for t, anch in self.anchors.items():
            for c in anch:
                arrays[f"anchor{t}/{c}"] = anch[c]
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @staticmethod
    def load(path):
        try:
            data = np.load(path)
            meta = json.loads(bytes(data["__meta__"]).decode())
        except Exception as exc:
            raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
        if meta.get("version") != FORMAT_VERSION:
            raise FormatError(
                f"checkpoint version {meta.get('version')} unsupported"
            )
        arch = []
        for s in meta["arch"]:
            if s["kind"] == "conv":
                arch.append(ConvSpec(s["channels"], s["kernel"], s["stride"],
                                     s["padding"]))
            else:
                arch.append(DenseSpec(s["units"]))
        lif = LIFConfig(**meta["lif"])
        net = Network(arch, meta["input_shape"], lif, meta["seed"])
        net.current_task = meta["current_task"]
        # rebuild layers directly from the arrays
        prev_units = net.input_shape[0]
        prev_kind = "conv"
        for li, spec in enumerate(arch):
            w = data[f"layer{li}/w"]
            b = data[f"layer{li}/b"]
            if isinstance(spec, ConvSpec):
                layer = Layer("conv", spec, w, b)
                prev_kind = "conv"
            else:
                block = 1
                if prev_kind == "conv":
                    h, wd = net._spatial[li - 1] if li else net.input_shape[1:]
                    block = h * wd
                layer = Layer("dense", spec, w, b, block=block)
                prev_kind = "dense"
            layer.trainable_w = data[f"layer{li}/trainable_w"]
            layer.trainable_b = data[f"layer{li}/trainable_b"]
            layer.exist = data[f"layer{li}/exist"]
            net.layers.append(layer)
        for tid, layer_idx, start, stop in meta["populations"]:
            net.layers[layer_idx].populations.append(
                NeuronPopulation(tid, layer_idx, start, stop)
            )
        for tstr, info in meta["tasks"].items():
            t = int(tstr)
            mask = TaskMask(
                t,
                [data[f"task{t}/active{li}"] for li in range(len(net.layers))],
                [data[f"task{t}/conn{li}"] for li in range(len(net.layers))],
                data[f"task{t}/head_active"],
            )
            net.masks[t] = mask
            head = TaskHead(t, info["classes"], data[f"task{t}/head_w"],
                            data[f"task{t}/head_b"])
            head.cil_w = Tensor(data[f"task{t}/cil_w"], requires_grad=True)
            head.cil_b = Tensor(data[f"task{t}/cil_b"], requires_grad=True)
            net.heads[t] = head
        for tstr, classes in meta["anchor_classes"].items():
            t = int(tstr)
            net.anchors[t] = {c: data[f"anchor{t}/{c}"] for c in classes}
        return net


def init_first_task(arch, input_shape, task0, lif=None, seed=0):
    """Build the initial dense network owned entirely by the first task."""
    net = Network(arch, input_shape, lif or LIFConfig(), seed)
    net._init_layers(task0)
    return net
