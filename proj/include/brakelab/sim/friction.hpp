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

#pragma once

#include <stdexcept>

namespace brakelab::sim {

// Burckhardt coefficients: mu(eta) = c1 * (1 - exp(-c2 * eta)) - c3 * eta.
struct FrictionTriple {
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 0.0;

  bool operator==(const FrictionTriple&) const = default;
};

inline constexpr FrictionTriple kDryAsphalt{1.2801, 23.99, 0.52};
inline constexpr FrictionTriple kWetPlastic{0.20, 94.13, 0.0646};
inline constexpr FrictionTriple kIcy{0.05, 306.39, 0.001};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Adhesion coefficient at slip eta in [0, 1]; clamped at zero.
double friction_mu(double eta, const FrictionTriple& triple);

// d(mu)/d(eta), zero where the clamp is active.
double friction_mu_slope(double eta, const FrictionTriple& triple);

// Maximum of mu over a 1e-4 slip grid.
double peak_mu(const FrictionTriple& triple);

// Slip at which peak_mu is attained on the same grid.
double peak_slip(const FrictionTriple& triple);

void validate(const FrictionTriple& triple);

}  // namespace brakelab::sim
