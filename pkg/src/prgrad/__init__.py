"""Reverse-mode autodiff on numpy with P, R and PR products."""
from .layers import (Conv2dSpec, LinearSpec, LstmParams, LstmState, ModelSpec, build_model,
                     conv2d_forward, linear_forward, lstm_cell, lstm_sequence, mlp_spec,
                     small_cnn_spec)
from .products import (ProductMode, ProductTerms, batched_product, closed_form_grads,
                       compute_terms, product_backward, product_forward, product_value,
                       rotation_derivative_check)
from .tensor import Tensor, backward, detach, no_grad, shadow_precision, zero_grad

__version__ = "0.1.0"
