// Copyright 2026 The STIP Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Step-by-step comparison of an untransformed forward pass against the
// transformed one, shared by the unit and acceptance suites.

#pragma once

#include <algorithm>

#include "stip/model.hpp"
#include "stip/transform.hpp"

namespace stip::testing {

struct StepDiffs {
  double q = 0, k = 0, value = 0, u = 0, v = 0, z = 0, y = 0, o = 0;
  bool routing_identical = true;

  double worst() const { return std::max({q, k, value, u, v, z, y, o}); }
};

// Runs F_theta(x) and F_theta'(x pi) with traces and measures each
// intermediate against its permuted original.
inline StepDiffs step_diffs(const ModelParams& params, const PermutationSet& set,
                            const TransformedModel& transformed, const Matrix& x, const Mask& mask) {
  ModelTrace plain;
  ModelTrace prot;
  const Matrix o = model_forward(x, params, mask, &plain);
  const Matrix o_prime = model_forward(apply_col_perm(x, set.pi), transformed.params, mask, &prot);
  StepDiffs d;
  auto upd = [](double& slot, const Matrix& expected, const Matrix& got) {
    slot = std::max(slot, max_abs_diff(expected, got));
  };
  for (std::size_t i = 0; i < plain.layers.size(); ++i) {
    const LayerTrace& a = plain.layers[i];
    const LayerTrace& b = prot.layers[i];
    const LayerPermutations& lp = set.layers[i];
    upd(d.q, apply_col_perm(a.attn.q, lp.pi1), b.attn.q);
    upd(d.k, apply_col_perm(a.attn.k, lp.pi1), b.attn.k);
    upd(d.value, apply_col_perm(a.attn.value, lp.pi2), b.attn.value);
    upd(d.u, apply_col_perm(a.attn.u, set.pi), b.attn.u);
    upd(d.v, apply_col_perm(a.v, set.pi), b.v);
    upd(d.z, apply_col_perm(a.z, set.pi), b.z);
    upd(d.y, apply_col_perm(a.y, set.pi), b.y);
    if (a.moe && b.moe) {
      upd(d.z, a.moe->router_logits, b.moe->router_logits);
      for (std::size_t t = 0; t < a.moe->routing.size(); ++t) {
        if (a.moe->routing[t].experts != b.moe->routing[t].experts) d.routing_identical = false;
      }
    }
  }
  upd(d.o, apply_col_perm(o, set.pi_c), o_prime);
  return d;
}

}  // namespace stip::testing
