#pragma once

#include "x2ct/tensor.hpp"

namespace x2ct {

/// Averaging projection of a (D,H,W,1) volume along depth: pixel(h,w) is the
/// mean over d. Linear, mean-preserving; the solver's graph op evaluates this
/// exact kernel.
Tensor project_depth(const Tensor& y);

/// Averaging projection along width: pixel(d,h) is the mean over w.
Tensor project_width(const Tensor& y);

/// Adjoint of project_depth: spreads an (H,W) image back over depth with
/// weight 1/D. Used for operator checks.
Tensor project_depth_adjoint(const Tensor& img, std::int64_t depth);

}  // namespace x2ct
