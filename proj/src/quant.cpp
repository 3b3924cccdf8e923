#include "bitskip/quant.hpp"

namespace bitskip {

template <typename Scalar>
BasicTensor<Scalar> ternary_weight_ste(const BasicTensor<Scalar>& w) {
  RowMatrix<Scalar> q = ternary_quantize(w.value()).dequantized();
  return record_op<Scalar>("ternary_quant", w.shape(), std::move(q), {&w},
                           [w](const RowMatrix<Scalar>& g) { accumulate_grad(w, ste_gradient(g)); });
}

template <typename Scalar>
BasicTensor<Scalar> quantize_activations_ste(const BasicTensor<Scalar>& x, int bits) {
  auto q = quantize_activations(x.value(), bits);
  return record_op<Scalar>("activation_quant", x.shape(), std::move(q.values), {&x},
                           [x](const RowMatrix<Scalar>& g) { accumulate_grad(x, ste_gradient(g)); });
}

template BasicTensor<float> ternary_weight_ste<float>(const BasicTensor<float>&);
template BasicTensor<double> ternary_weight_ste<double>(const BasicTensor<double>&);
template BasicTensor<float> quantize_activations_ste<float>(const BasicTensor<float>&, int);
template BasicTensor<double> quantize_activations_ste<double>(const BasicTensor<double>&, int);

}  // namespace bitskip
