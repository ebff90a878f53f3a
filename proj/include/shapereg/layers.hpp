#pragma once

#include <string>
#include <utility>
#include <vector>

#include "shapereg/serialize.hpp"
#include "shapereg/tensor.hpp"

namespace shapereg {

// Trainable layers. Parameters are He-initialized (fan-in scaling), biases
// start at zero; initialization order is fixed so a seed pins every weight.

struct Linear {
  Tensor w;  // {in, out}
  Tensor b;  // {out}

  Linear() = default;

  Linear(int in, int out, Rng& rng) {
    w = Tensor::randn({in, out}, rng, std::sqrt(2.0 / in));
    w.set_requires_grad(true);
    b = Tensor::zeros({out});
    b.set_requires_grad(true);
  }

  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, w), b); }

  void params(NamedTensors& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

struct Conv {
  Tensor w;  // {out_c, in_c, k, k}
  Tensor b;  // {out_c}
  int stride = 1;
  int dilation = 1;
  int padding = 0;

  Conv() = default;

  Conv(int in_c, int out_c, int k, int stride_, int dilation_, int padding_,
       Rng& rng)
      : stride(stride_), dilation(dilation_), padding(padding_) {
    w = Tensor::randn({out_c, in_c, k, k}, rng,
                      std::sqrt(2.0 / (static_cast<double>(in_c) * k * k)));
    w.set_requires_grad(true);
    b = Tensor::zeros({out_c});
    b.set_requires_grad(true);
  }

  Tensor operator()(const Tensor& x) const {
    return add_bias(conv2d(x, w, stride, dilation, padding), b);
  }

  void params(NamedTensors& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

inline long long param_count(const NamedTensors& params) {
  long long n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

// Copies stored values into an existing parameter set, matching by name.
// Every parameter must be present with identical shape; extra entries with
// the same prefix are rejected.
inline void load_into(const NamedTensors& stored, NamedTensors params) {
  for (auto& [name, t] : params) {
    bool found = false;
    for (const auto& [sname, st] : stored) {
      if (sname != name) continue;
      require(st.shape() == t.shape(),
              "load_into: shape mismatch for '" + name + "': stored " +
                  dims_str(st.shape()) + ", expected " + dims_str(t.shape()));
      t.raw_data() = st.values();
      found = true;
      break;
    }
    require(found, "load_into: missing entry '" + name + "'");
  }
}

}  // namespace shapereg
