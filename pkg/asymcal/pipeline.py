"""Whole-model calibration, one block at a time.

Two activation streams flow through the model: the full-precision stream
X_tilde (original weights, activation quantization off) and the quantized
stream X (already quantized layers, activation quantization on when it is
enabled before weight calibration). For every block the full-precision
inputs of each layer are captured once; each layer is then calibrated against
the quantized-path input seen after the layers before it were quantized.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from .config import AQOrder, QuantConfig
from .engine import asym_loss, calibrate_layer
from .exceptions import AsymcalError, CalibrationError, ShapeError
from .quantizer import ActQuantConfig, quantize_activations
from .report import BlockReport, CalibReport
from .tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

BLOCK_KINDS = {
    "mlp": ("up_proj", "down_proj"),
    "transformer": ("q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj"),
}
NONLINEARITY = "gelu_rational"
NORM_EPS = 1e-6
MODEL_FILE = "model.json"

InputHook = Callable[[str, np.ndarray], None]


@dataclass
class LinearLayer:
    """Bias-free linear map y = W @ x."""

    name: str
    weight: np.ndarray

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class Block:
    """Pre-norm block; ``layers`` is ordered as the forward pass uses them."""

    kind: str
    layers: Dict[str, LinearLayer]

    def copy(self) -> "Block":
        return Block(
            kind=self.kind,
            layers={name: LinearLayer(name, layer.weight.copy()) for name, layer in self.layers.items()},
        )


@dataclass
class ModelGraph:
    """Ordered blocks sharing one residual width."""

    blocks: List[Block]
    width: int
    tokens_per_sample: int = 1
    dtype: str = "f64"
    seed: Optional[int] = None
    nonlinearity: str = NONLINEARITY
    toy_spec: Optional[dict] = None

    def validate(self) -> None:
        """Check that every block's layers chain and keep the residual width."""
        if not self.blocks:
            raise ShapeError("Model must contain at least one block")
        for i, block in enumerate(self.blocks):
            expected = BLOCK_KINDS.get(block.kind)
            if expected is None:
                raise ShapeError(f"Block {i}: unknown kind '{block.kind}'")
            if tuple(block.layers) != expected:
                raise ShapeError(f"Block {i}: expected layers {expected}, got {tuple(block.layers)}")
            _check_block_shapes(i, block, self.width)

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            blocks=[b.copy() for b in self.blocks],
            width=self.width,
            tokens_per_sample=self.tokens_per_sample,
            dtype=self.dtype,
            seed=self.seed,
            nonlinearity=self.nonlinearity,
            toy_spec=self.toy_spec,
        )


def _check_block_shapes(index: int, block: Block, width: int) -> None:
    def shape(name):
        return block.layers[name].weight.shape

    if block.kind == "transformer":
        for name in ("q_proj", "k_proj", "v_proj"):
            if shape(name)[1] != width:
                raise ShapeError(f"Block {index}: {name} expects {shape(name)[1]} inputs, width is {width}")
        if shape("q_proj")[0] != shape("k_proj")[0]:
            raise ShapeError(f"Block {index}: q_proj and k_proj output sizes differ")
        if shape("o_proj") != (width, shape("v_proj")[0]):
            raise ShapeError(f"Block {index}: o_proj shape {shape('o_proj')} does not close the attention branch")
    hidden = shape("up_proj")[0]
    if shape("up_proj")[1] != width or shape("down_proj") != (width, hidden):
        raise ShapeError(
            f"Block {index}: up_proj {shape('up_proj')} / down_proj {shape('down_proj')} do not chain at width {width}"
        )


@dataclass
class DualStream:
    """Quantized-path and full-precision block inputs."""

    X: np.ndarray
    X_tilde: np.ndarray

    def __post_init__(self):
        if self.X.shape != self.X_tilde.shape:
            raise ShapeError(f"Stream shapes differ: X {self.X.shape}, X_tilde {self.X_tilde.shape}")

    def mae(self) -> float:
        return block_mae(self.X_tilde, self.X)


def rms_norm(x: np.ndarray) -> np.ndarray:
    """Scale every token (column) to unit root-mean-square."""
    return x / np.sqrt(np.mean(x * x, axis=0, keepdims=True) + NORM_EPS)


def gelu_rational(x: np.ndarray) -> np.ndarray:
    # tanh in the GELU approximation replaced by z / sqrt(1 + z^2)
    z = 0.7978845608028654 * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + z / np.sqrt(1.0 + z * z))


def softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, tokens: int) -> np.ndarray:
    """
    Single-head dot-product attention within each sample's token group.

    Args:
        q, k: d x (samples * tokens) projections
        v: d_v x (samples * tokens) values
        tokens: Tokens per sample

    Returns:
        d_v x (samples * tokens) attended values
    """
    cols = q.shape[1]
    if cols % tokens != 0:
        raise ShapeError(f"{cols} columns are not a whole number of {tokens}-token samples")
    samples = cols // tokens
    qs = q.reshape(q.shape[0], samples, tokens)
    ks = k.reshape(k.shape[0], samples, tokens)
    vs = v.reshape(v.shape[0], samples, tokens)
    scores = np.einsum("dsi,dsj->sij", qs, ks) / np.sqrt(q.shape[0])
    weights = softmax_rows(scores)
    return np.einsum("sij,dsj->dsi", weights, vs).reshape(v.shape[0], cols)


class _StopForward(Exception):
    pass


def _linear(
    layer: LinearLayer,
    inp: np.ndarray,
    act_cfg: Optional[ActQuantConfig],
    on_input: Optional[InputHook],
    stop_at: Optional[str],
) -> np.ndarray:
    if act_cfg is not None and act_cfg.active:
        inp = quantize_activations(inp, act_cfg)
    if on_input is not None:
        on_input(layer.name, inp)
    if stop_at == layer.name:
        raise _StopForward
    return np.asarray(layer.weight, dtype=np.float64) @ inp


def forward_block(
    block: Block,
    x: np.ndarray,
    tokens: int,
    act_cfg: Optional[ActQuantConfig] = None,
    on_input: Optional[InputHook] = None,
    stop_at: Optional[str] = None,
) -> Optional[np.ndarray]:
    """
    Run one block.

    Args:
        block: Block to run
        x: Block input, width x k
        tokens: Tokens per sample (attention grouping)
        act_cfg: Simulated activation quantization applied to every linear input
        on_input: Called with (layer name, layer input) before each linear layer
        stop_at: Stop after the input of this layer has been reported

    Returns:
        Block output, or None when stopped early
    """
    lin = block.layers
    try:
        def run(name, inp):
            return _linear(lin[name], inp, act_cfg, on_input, stop_at)

        if block.kind == "transformer":
            h = rms_norm(x)
            q, k, v = run("q_proj", h), run("k_proj", h), run("v_proj", h)
            x = x + run("o_proj", attention(q, k, v, tokens))
        h = rms_norm(x)
        return x + run("down_proj", gelu_rational(run("up_proj", h)))
    except _StopForward:
        return None


def capture_input(
    block: Block, x: np.ndarray, tokens: int, name: str, act_cfg: Optional[ActQuantConfig] = None
) -> np.ndarray:
    """Input of layer ``name`` when ``x`` enters ``block``."""
    seen: Dict[str, np.ndarray] = {}
    forward_block(block, x, tokens, act_cfg, on_input=seen.__setitem__, stop_at=name)
    return seen[name]


def forward_model(
    model: ModelGraph, x: np.ndarray, act_cfg: Optional[ActQuantConfig] = None
) -> np.ndarray:
    """Run all blocks of ``model`` on ``x``."""
    for block in model.blocks:
        x = forward_block(block, x, model.tokens_per_sample, act_cfg)
    return x


def block_mae(x_tilde: np.ndarray, x: np.ndarray) -> float:
    """
    Mean absolute difference over all elements.

    Args:
        x_tilde: Full-precision activations
        x: Quantized-path activations

    Returns:
        mean(|x_tilde - x|)
    """
    if x_tilde.shape != x.shape:
        raise ShapeError(f"Shapes differ: {x_tilde.shape} vs {x.shape}")
    return float(np.mean(np.abs(np.asarray(x_tilde, dtype=np.float64) - np.asarray(x, dtype=np.float64))))


class CaptureStore:
    """Full-precision layer inputs of the block being calibrated.

    Counts live entries so tests can check that only one block's captures
    exist at a time. With ``spill_dir`` set, captures go to tensor files.
    """

    def __init__(self, spill_dir: Optional[Union[str, Path]] = None):
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        if self.spill_dir is not None:
            self.spill_dir.mkdir(parents=True, exist_ok=True)
        self._items: Dict[str, Union[np.ndarray, Path]] = {}
        self.live = 0
        self.peak = 0
        self.live_bytes = 0
        self.peak_bytes = 0
        self._sizes: Dict[str, int] = {}

    def put(self, name: str, m: np.ndarray) -> None:
        if name in self._items:
            raise KeyError(f"Capture '{name}' already present")
        if self.spill_dir is not None:
            path = self.spill_dir / f"{name}.gtaq"
            write_tensor(path, m)
            self._items[name] = path
        else:
            self._items[name] = m
        self._sizes[name] = m.nbytes
        self.live += 1
        self.live_bytes += m.nbytes
        self.peak = max(self.peak, self.live)
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)

    def pop(self, name: str) -> np.ndarray:
        item = self._items.pop(name)
        self.live -= 1
        self.live_bytes -= self._sizes.pop(name)
        if isinstance(item, Path):
            m = read_tensor(item)
            item.unlink()
            return m
        return item

    def reset_peak(self) -> None:
        self.peak = self.live
        self.peak_bytes = self.live_bytes


def _annotate(e: AsymcalError, block: int, layer: str) -> CalibrationError:
    return CalibrationError(
        f"block {block}, layer {layer}: {e}",
        column=getattr(e, "column", None),
        block=block,
        layer=layer,
    )


def _evaluate(
    model: ModelGraph, quantized: ModelGraph, calib: np.ndarray, act_cfg: ActQuantConfig
) -> List[dict]:
    """Re-forward both streams through the finished models and collect metrics."""
    aq = act_cfg if act_cfg.active else None
    tokens = model.tokens_per_sample
    x_tilde = calib
    x = calib
    out = []
    for fp_block, q_block in zip(model.blocks, quantized.blocks):
        fp_inputs: Dict[str, np.ndarray] = {}
        q_inputs: Dict[str, np.ndarray] = {}
        next_tilde = forward_block(fp_block, x_tilde, tokens, None, on_input=fp_inputs.__setitem__)
        next_x = forward_block(q_block, x, tokens, aq, on_input=q_inputs.__setitem__)
        losses = {
            name: asym_loss(
                q_block.layers[name].weight, fp_block.layers[name].weight, q_inputs[name], fp_inputs[name]
            )
            for name in fp_block.layers
        }
        out.append({
            "input_mae": block_mae(x_tilde, x),
            "mae": block_mae(next_tilde, next_x),
            "losses": losses,
        })
        x_tilde, x = next_tilde, next_x
    return out


def calibrate_model(
    model: ModelGraph,
    calib: np.ndarray,
    cfg: QuantConfig,
    spill_dir: Optional[Union[str, Path]] = None,
    store: Optional[CaptureStore] = None,
) -> CalibReport:
    """
    Quantize every linear layer of ``model`` block by block.

    Args:
        model: Full-precision model (left unchanged)
        calib: Calibration activations, width x k
        cfg: Calibration settings
        spill_dir: Optional directory for spilled captures
        store: Optional capture store (for inspection); one is created otherwise

    Returns:
        CalibReport whose ``model`` attribute is the quantized model
    """
    start = time.perf_counter()
    model.validate()
    calib = np.asarray(calib, dtype=np.float64)
    if calib.ndim != 2 or calib.shape[0] != model.width:
        raise ShapeError(f"Calibration data {calib.shape} does not match model width {model.width}")
    if calib.shape[1] < model.width:
        raise ShapeError(f"Need at least {model.width} calibration columns, got {calib.shape[1]}")

    if store is None:
        store = CaptureStore(spill_dir)
    aq = cfg.act_cfg if (cfg.aq_order == AQOrder.A_THEN_W and cfg.act_cfg.active) else None
    tokens = model.tokens_per_sample
    quantized = model.copy()
    stream = DualStream(X=calib, X_tilde=calib)
    report = CalibReport(config=cfg.model_dump(mode="json"))

    for i, fp_block in enumerate(model.blocks):
        store.reset_peak()
        next_tilde = forward_block(fp_block, stream.X_tilde, tokens, None, on_input=store.put)

        q_block = quantized.blocks[i]
        results = []
        max_state = 0
        for name in fp_block.layers:
            x_layer = capture_input(q_block, stream.X, tokens, name, aq)
            x_tilde_layer = store.pop(name)
            try:
                result = calibrate_layer(fp_block.layers[name].weight, x_layer, x_tilde_layer, cfg)
            except AsymcalError as e:
                logger.error(f"Calibration failed in block {i}, layer {name}: {e}")
                raise _annotate(e, i, name) from e
            result.name = name
            q_block.layers[name].weight = result.Q.astype(fp_block.layers[name].weight.dtype)
            max_state = max(max_state, result.state_bytes)
            results.append(result)

        if store.live:
            raise RuntimeError(f"{store.live} capture(s) left after block {i}")

        next_x = forward_block(q_block, stream.X, tokens, aq)
        report.blocks.append(BlockReport(
            block_index=i,
            input_mae=stream.mae(),
            mae=block_mae(next_tilde, next_x),
            layers=results,
            peak_captures=store.peak,
            capture_bytes=store.peak_bytes,
            state_bytes=max_state,
        ))
        logger.info(f"Block {i}: {len(results)} layer(s) calibrated, mae={report.blocks[-1].mae:.4g}")
        stream = DualStream(X=next_x, X_tilde=next_tilde)

    for block_report, metrics in zip(report.blocks, _evaluate(model, quantized, calib, cfg.act_cfg)):
        block_report.input_mae = metrics["input_mae"]
        block_report.mae = metrics["mae"]
        for layer in block_report.layers:
            layer.eval_asym_loss = metrics["losses"][layer.name]

    report.model = quantized
    report.elapsed = time.perf_counter() - start
    logger.info(
        f"Calibrated {len(model.blocks)} block(s) in {report.elapsed:.2f}s, "
        f"final mae={report.final_mae:.4g}"
    )
    return report


def _dtype_for(tag: str):
    if tag not in ("f32", "f64"):
        raise ShapeError(f"Unknown model dtype '{tag}'")
    return np.float32 if tag == "f32" else np.float64


def save_model(model: ModelGraph, directory: Union[str, Path]) -> Path:
    """
    Write the model description JSON and one tensor file per layer.

    Args:
        model: Model to store
        directory: Output directory (created if missing)

    Returns:
        Path of the written JSON file
    """
    directory = Path(directory)
    (directory / "weights").mkdir(parents=True, exist_ok=True)
    dtype = _dtype_for(model.dtype)
    blocks = []
    for i, block in enumerate(model.blocks):
        layers = []
        for name, layer in block.layers.items():
            rel = f"weights/block{i}_{name}.gtaq"
            write_tensor(directory / rel, np.asarray(layer.weight, dtype=dtype))
            layers.append({"name": name, "rows": layer.out_features, "cols": layer.in_features, "path": rel})
        blocks.append({"kind": block.kind, "layers": layers})

    desc = {
        "width": model.width,
        "tokens_per_sample": model.tokens_per_sample,
        "dtype": model.dtype,
        "seed": model.seed,
        "nonlinearity": model.nonlinearity,
        "toy_spec": model.toy_spec,
        "blocks": blocks,
    }
    path = directory / MODEL_FILE
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(desc, fh, indent=2)
    logger.info(f"Saved {len(blocks)} block(s) to {directory}")
    return path


def load_model(path: Union[str, Path]) -> ModelGraph:
    """
    Load a model description JSON (or a directory holding ``model.json``).

    Args:
        path: JSON file or directory

    Returns:
        Validated ModelGraph
    """
    path = Path(path)
    if path.is_dir():
        path = path / MODEL_FILE
    with open(path, "r", encoding="utf-8") as fh:
        desc = json.load(fh)

    if desc.get("nonlinearity", NONLINEARITY) != NONLINEARITY:
        raise ShapeError(f"Unsupported nonlinearity '{desc['nonlinearity']}'")
    dtype = _dtype_for(desc.get("dtype", "f64"))
    blocks = []
    for entry in desc["blocks"]:
        layers = {}
        for layer_desc in entry["layers"]:
            weight = read_tensor(path.parent / layer_desc["path"]).astype(dtype)
            if weight.shape != (layer_desc["rows"], layer_desc["cols"]):
                raise ShapeError(
                    f"{layer_desc['path']}: stored shape {weight.shape} differs from declared "
                    f"({layer_desc['rows']}, {layer_desc['cols']})"
                )
            layers[layer_desc["name"]] = LinearLayer(layer_desc["name"], weight)
        blocks.append(Block(kind=entry["kind"], layers=layers))

    model = ModelGraph(
        blocks=blocks,
        width=int(desc["width"]),
        tokens_per_sample=int(desc.get("tokens_per_sample", 1)),
        dtype=desc.get("dtype", "f64"),
        seed=desc.get("seed"),
        nonlinearity=desc.get("nonlinearity", NONLINEARITY),
        toy_spec=desc.get("toy_spec"),
    )
    model.validate()
    return model
