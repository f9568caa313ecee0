from forge.nn.layers import (
    DENSE,
    DROPOUT,
    LAMBDA,
    RELU,
    SIGMOID,
    TANH,
    LayerSpec,
    NetworkSpec,
    clear_lambdas,
    infer_shapes,
    lambda_impl,
    param_shapes,
    register_lambda,
    spec_from_dict,
    spec_from_json,
    spec_to_dict,
    spec_to_json,
    validate_spec,
)
from forge.nn.network import (
    EVAL,
    LOSSES,
    TRAIN,
    NetworkState,
    backward,
    build_network,
    forward,
    mse_loss,
    sgd_step,
    softmax_xent_loss,
    state_from_tensors,
    state_tensors,
    train_epochs,
)
from forge.nn.rng import XorShift64, derive_seed
