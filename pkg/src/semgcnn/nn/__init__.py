from .layers import (
    BatchNorm,
    Conv1d,
    Dropout,
    Flatten,
    LayerStateError,
    Linear,
    LocallyConnected1d,
    ParamTensor,
    ReLU,
    ShapeError,
    conv1d_backward,
    conv1d_forward,
    cross_entropy,
    dropout,
    linear_backward,
    linear_forward,
    locally_connected_backward,
    locally_connected_forward,
    log_softmax,
    relu,
    softmax,
)
from .network import Network, NetworkSpec, build_network, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
