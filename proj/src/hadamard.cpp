#include "bitskip/hadamard.hpp"

namespace bitskip {

template <typename Scalar>
BasicTensor<Scalar> fht_rows(const BasicTensor<Scalar>& x) {
  RowMatrix<Scalar> y = x.value();
  fht_rows_inplace(y);
  return record_op<Scalar>("hadamard", x.shape(), std::move(y), {&x}, [x](const RowMatrix<Scalar>& g) {
    RowMatrix<Scalar> gx = g;
    fht_rows_inplace(gx);
    accumulate_grad(x, gx);
  });
}

template BasicTensor<float> fht_rows<float>(const BasicTensor<float>&);
template BasicTensor<double> fht_rows<double>(const BasicTensor<double>&);

}  // namespace bitskip
