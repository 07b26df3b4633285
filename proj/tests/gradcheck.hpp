#pragma once

// Test-only finite-difference oracle for the encoder gradients. Central
// differences on a perturbed copy of the parameters, independent of the
// reverse-mode path it checks.

#include <cmath>
#include <string>
#include <vector>

#include "ctok/model.hpp"

namespace ctok::testing {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_tensor;
  int64_t checked = 0;
};

inline double rel_err(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / scale;
}

template <typename T>
double loss_of(const EncoderParams<T>& p, std::span<const int32_t> ids,
               std::span<const int32_t> attn, std::span<const int32_t> labels, int batch) {
  const Mat<T> logits = forward(p, ids, attn, batch, false, 0, 1);
  const LossResult<T> res = p.head == HeadKind::kToken
                                ? loss_token(logits, labels)
                                : loss_binary(logits, labels);
  return res.loss;
}

// Central finite differences over every parameter (stride > 1 subsamples
// within each tensor to bound runtime; stride 1 checks everything).
inline GradCheckReport gradcheck(EncoderParams<double>& params, std::span<const int32_t> ids,
                                 std::span<const int32_t> attn, std::span<const int32_t> labels,
                                 int batch, int stride = 1, double h = 1e-5) {
  EncoderParams<double> grads = backward(params, ids, attn, labels, batch);

  GradCheckReport report;
  std::vector<std::pair<std::string, std::pair<double*, size_t>>> tensors;
  visit_params(params, [&](const std::string& name, double* data, size_t n, bool) {
    tensors.push_back({name, {data, n}});
  });
  std::vector<std::pair<std::string, std::pair<double*, size_t>>> grad_tensors;
  visit_params(grads, [&](const std::string& name, double* data, size_t n, bool) {
    grad_tensors.push_back({name, {data, n}});
  });

  for (size_t t = 0; t < tensors.size(); ++t) {
    double* data = tensors[t].second.first;
    const double* grad = grad_tensors[t].second.first;
    const size_t n = tensors[t].second.second;
    for (size_t i = 0; i < n; i += stride) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_of(params, ids, attn, labels, batch);
      data[i] = saved - h;
      const double down = loss_of(params, ids, attn, labels, batch);
      data[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double err = rel_err(fd, grad[i]);
      ++report.checked;
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst_tensor = tensors[t].first;
      }
    }
  }
  return report;
}

}  // namespace ctok::testing
