"""Mini fully convolutional network trained slice-wise with class-balanced cross entropy."""

from .net import (MiniFcn, NetConfig, activation_pattern, backward, class_weights, forward, init_net,
                  layer_specs, loss, loss_and_grad, predict, slice_weights)
