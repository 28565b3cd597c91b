"""Multiplication-free neural networks built on lp-distance adder layers."""

from .tensor import RngState, im2col, col2im, randn_seeded, reduce_l2_norm
from .layers import (AdderLayerParams, BatchNormParams, ConvLayerParams,
                     GradientMode, adder_forward, adder_grad_filters,
                     adder_grad_input, bn_backward, bn_forward, conv_forward,
                     conv_grad, relu, sigmoid_bce, softmax_cross_entropy)
from .netgraph import (LayerSpec, Network, NetworkSpec, build_network,
                       backward_pass, count_ops, forward_pass, lenet5_bn,
                       load_checkpoint, predict, predict_grid, save_checkpoint,
                       two_layer_classifier)
from .optim import (LrSchedule, NagOptimizer, PSchedule, adaptive_scale,
                    lr_at, p_at_epoch)

__version__ = "0.1.0"
