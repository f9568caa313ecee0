"""Built-in task handlers and the sample byte conventions.

Sample documents carry their feature vector as little-endian f32 bytes in
the payload; the training target rides in the label (an integer class for
softmax-xent, comma-separated floats for mse).

The train handler is deterministic given its task: it starts from the
explicit ``init_version`` param or a fresh seed, and the input slice and
data order are fixed by the task's key range. A replayed attempt therefore
reproduces the same trained bytes and the same content-addressed version id,
which is what keeps "exactly one version per train task" true under crashes.
"""

from __future__ import annotations

import threading

import numpy as np

from forge.errors import InvalidArgument, InvalidSpec
from forge.faults import kill_point
from forge.nn import layers as nnlayers
from forge.nn import network as nnet
from forge.workflow import TaskContext


def encode_sample(vec: np.ndarray) -> bytes:
    return np.ascontiguousarray(vec, dtype="<f4").tobytes()


def decode_sample(payload: bytes, dims: tuple[int, ...]) -> np.ndarray:
    arr = np.frombuffer(payload, dtype="<f4")
    want = int(np.prod(dims))
    if arr.size != want:
        raise InvalidArgument(
            f"sample payload has {arr.size} floats, spec expects {want}")
    return arr.reshape(dims).copy()


def parse_target(label: str | None, loss: str):
    if label is None:
        raise InvalidArgument("training documents need a label")
    if loss == "softmax-xent":
        return int(label)
    return np.array([float(part) for part in label.split(",")], dtype=np.float32)


def _batches(xs: np.ndarray, ts: np.ndarray, batch_size: int):
    def epoch():
        for i in range(0, len(xs), batch_size):
            yield xs[i:i + batch_size], ts[i:i + batch_size]

    return epoch


def train_handler(ctx: TaskContext) -> None:
    """Built-in "train" kind: read the input slice, run SGD, save a version,
    record loss events, and optionally emit per-sample output documents."""
    api = ctx.api
    task = ctx.task
    record = api.get_model(task.model_key)
    spec = nnlayers.spec_from_dict(record.spec)

    loss = str(ctx.param("loss", "mse"))
    lr = float(ctx.param("lr", 0.1))
    epochs = int(ctx.param("epochs", 1))
    batch_size = int(ctx.param("batch_size", 32))
    seed = int(ctx.param("seed", 1))
    init_version = ctx.param("init_version")

    if init_version:
        version = api.get_version(task.model_key, init_version)
        tensors = api.load_state(task.model_key, init_version)
        state = nnet.state_from_tensors(spec, tensors, seed, step=version.step)
    else:
        state = nnet.build_network(spec, seed)

    docs = ctx.input_docs()
    xs = np.stack([decode_sample(d.payload, spec.input_dims) for d in docs]) if docs else None
    events = [("seed", state.step, float(seed))]
    kill_point("handler.before_train")
    if docs and epochs > 0:
        targets = [parse_target(d.label, loss) for d in docs]
        ts = (np.array(targets, dtype=np.int64) if loss == "softmax-xent"
              else np.stack(targets))
        state, events = nnet.train_epochs(state, _batches(xs, ts, batch_size),
                                          loss, lr, epochs)
    kill_point("handler.before_save")
    metrics = {"loss": float(events[-1][2])} if events[-1][0] == "loss" else {}
    version = api.save_state(task.model_key, state.step, nnet.state_tensors(state),
                             metrics=metrics,
                             parent_version=init_version if init_version else None)
    for name, step, value in events:
        api.record_event(task.model_key, step, name, value)

    emit = str(ctx.param("emit", "none"))
    if emit != "none" and docs:
        eval_state = state
        if emit.startswith("hidden:"):
            layer_name = emit.split(":", 1)[1]
            names = [layer.name for layer in spec.layers]
            if layer_name not in names:
                raise InvalidSpec(f"emit layer {layer_name!r} not in network")
            truncated = nnlayers.NetworkSpec(
                input_dims=spec.input_dims,
                layers=spec.layers[:names.index(layer_name) + 1])
            eval_state = nnet.NetworkState(spec=truncated, params=state.params,
                                           seed=state.seed, step=state.step)
        outputs, _ = nnet.forward(eval_state, xs, nnet.EVAL)
        for doc, vec in zip(docs, outputs):
            ctx.write_output(encode_sample(vec), label=doc.label,
                             tags={"dataset": task.output_dataset})
        kill_point("handler.after_outputs")


_user_fns: dict[str, object] = {}
_user_fns_lock = threading.Lock()


def register_user_fn(name: str, fn) -> None:
    """Register a callable for "user_fn" tasks; dispatched by the `fn` param."""
    with _user_fns_lock:
        _user_fns[name] = fn


def clear_user_fns() -> None:
    with _user_fns_lock:
        _user_fns.clear()


def user_fn_handler(ctx: TaskContext) -> None:
    name = ctx.param("fn")
    with _user_fns_lock:
        fn = _user_fns.get(name)
    if fn is None:
        raise InvalidArgument(f"no user function registered under {name!r}")
    fn(ctx)


DEFAULT_HANDLERS = {"train": train_handler, "user_fn": user_fn_handler}
