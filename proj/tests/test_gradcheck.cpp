// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "zsumm/gradcheck_suite.hpp"

using namespace zsumm;

TEST_CASE("finite-difference sweep passes on a few instances") {
  GradCheckSuiteOptions opt;
  opt.seed = 3;
  opt.instances = 2;
  const auto results = gradcheck_suite(opt);
  CHECK(results.size() == 26);
  for (const auto& r : results) {
    INFO(r.name << " max error " << r.max_error << " at " << r.worst);
    CHECK(r.passed);
    CHECK(r.instances == 2);
    CHECK(r.coords > 0);
  }
}

TEST_CASE("a wrong analytic gradient is caught") {
  auto x = Tensor<double>::from({3}, {0.5, -1.0, 2.0}, true);
  // stop_gradient hides the true derivative of the second factor.
  auto res = check_gradients([&] { return sum(mul(x, stop_gradient(x))); }, {x});
  CHECK(res.max_error > 0.1);
}
