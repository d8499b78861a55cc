#include "revtrain/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "revtrain/errors.hpp"
#include "revtrain/ops.hpp"

namespace revtrain {

template <typename T>
std::vector<BasicTensor<T>> mode_gradients(SequentialModel<T>& model, const BasicTensor<T>& x,
                                           const std::vector<int>& labels, BackpropMode mode) {
  model.zero_grad();
  SavedState<T> saved;
  BasicTensor<T> logits = model_forward(model, x, mode, saved);
  BasicTensor<T> g(logits.shape());
  softmax_cross_entropy<T>(logits, labels, &g);
  logits.release();
  model_backward(model, saved, g, mode);
  std::vector<BasicTensor<T>> out;
  for (Param<T>* p : model.params()) out.push_back(p->grad);
  return out;
}

template <typename T>
GradcheckReport gradcheck(const ArchSpec& spec, BackpropMode mode, const GradcheckOptions& opt) {
  if (opt.batch < 2) throw ConfigError("gradcheck: batch must be >= 2");
  ArchSpec s = spec;
  check_mode(s, mode);
  SequentialModel<T> model(s, opt.seed);
  const BasicTensor<T> x =
      gaussian<T>(checked_shape(opt.batch, s.input_channels, s.height, s.width), 0.0, 1.0, opt.seed + 1);
  std::vector<int> labels;
  for (std::int64_t i = 0; i < opt.batch; ++i) labels.push_back(static_cast<int>(i % s.num_classes));

  GradcheckReport r;
  r.mode = mode;
  const auto named = model.named_params();
  const auto ref = mode_gradients(model, x, labels, BackpropMode::stored);
  const auto got = mode == BackpropMode::stored ? ref : mode_gradients(model, x, labels, mode);

  double total = 0.0;
  for (const auto& t : ref) total += sum_sq_norm(t);
  const double min_den = (std::is_same_v<T, float> ? 1e-3 : 1e-6) * std::sqrt(total);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double den = std::max(std::sqrt(sum_sq_norm(ref[i])), min_den);
    const double num = std::sqrt(sum_sq_diff(got[i], ref[i]));
    const double e = den > 0.0 ? num / den : num;
    r.vs_stored.push_back({named[i].first, e});
    r.worst_vs_stored = std::max(r.worst_vs_stored, std::isnan(e) ? INFINITY : e);
  }

  if (opt.fd_coords > 0) {
    auto loss = [&] {
      SavedState<T> saved;
      return softmax_cross_entropy<T>(model_forward(model, x, BackpropMode::stored, saved), labels, nullptr).loss;
    };
    for (std::size_t i = 0; i < named.size(); ++i) {
      BasicTensor<T>& v = named[i].second->value;
      const std::int64_t n = std::min(v.numel(), opt.fd_coords);
      const std::int64_t stride = std::max<std::int64_t>(1, v.numel() / n);
      double worst = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        const std::int64_t k = j * stride;
        const T keep = v.data()[k];
        v.data()[k] = static_cast<T>(keep + opt.fd_step);
        const double fp = loss();
        v.data()[k] = static_cast<T>(keep - opt.fd_step);
        const double fm = loss();
        v.data()[k] = keep;
        const double numeric = (fp - fm) / (2.0 * opt.fd_step);
        const double e = std::abs(static_cast<double>(ref[i].data()[k]) - numeric) / std::max(1.0, std::abs(numeric));
        worst = std::max(worst, std::isnan(e) ? INFINITY : e);
      }
      r.vs_numeric.push_back({named[i].first, worst});
      r.worst_vs_numeric = std::max(r.worst_vs_numeric, worst);
    }
  }
  return r;
}

std::string gradcheck_csv(const GradcheckReport& r) {
  std::ostringstream out;
  out << "tensor,mode,vs_stored,vs_numeric\n";
  for (std::size_t i = 0; i < r.vs_stored.size(); ++i) {
    out << r.vs_stored[i].name << ',' << mode_name(r.mode) << ',' << r.vs_stored[i].error << ',';
    if (i < r.vs_numeric.size()) out << r.vs_numeric[i].error;
    out << '\n';
  }
  return out.str();
}

template std::vector<Tensor> mode_gradients<float>(SequentialModel<float>&, const Tensor&, const std::vector<int>&,
                                                   BackpropMode);
template std::vector<TensorD> mode_gradients<double>(SequentialModel<double>&, const TensorD&,
                                                     const std::vector<int>&, BackpropMode);
template GradcheckReport gradcheck<float>(const ArchSpec&, BackpropMode, const GradcheckOptions&);
template GradcheckReport gradcheck<double>(const ArchSpec&, BackpropMode, const GradcheckOptions&);

}  // namespace revtrain
