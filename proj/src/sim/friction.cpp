// Copyright 2026 The brakelab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "brakelab/sim/friction.hpp"

#include <cmath>
#include <string>

namespace brakelab::sim {

namespace {

void check_slip(double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) {
    throw DomainError("friction_mu: slip " + std::to_string(eta) + " outside [0,1]");
  }
}

struct Peak {
  double mu = 0.0;
  double slip = 0.0;
};

Peak scan(const FrictionTriple& t) {
  Peak best;
  for (int i = 0; i <= 10000; ++i) {
    const double eta = i * 1e-4;
    const double mu = friction_mu(eta, t);
    if (mu > best.mu) best = {mu, eta};
  }
  return best;
}

}  // namespace

void validate(const FrictionTriple& t) {
  if (!(t.c1 > 0.0 && t.c2 > 0.0 && t.c3 > 0.0)) {
    throw DomainError("friction triple components must be positive");
  }
}

double friction_mu(double eta, const FrictionTriple& t) {
  check_slip(eta);
  const double mu = t.c1 * (1.0 - std::exp(-t.c2 * eta)) - t.c3 * eta;
  return mu > 0.0 ? mu : 0.0;
}

double friction_mu_slope(double eta, const FrictionTriple& t) {
  check_slip(eta);
  if (t.c1 * (1.0 - std::exp(-t.c2 * eta)) - t.c3 * eta <= 0.0 && eta > 0.0) return 0.0;
  return t.c1 * t.c2 * std::exp(-t.c2 * eta) - t.c3;
}

double peak_mu(const FrictionTriple& t) { return scan(t).mu; }

double peak_slip(const FrictionTriple& t) { return scan(t).slip; }

}  // namespace brakelab::sim
