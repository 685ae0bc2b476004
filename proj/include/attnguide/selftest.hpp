#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace attnguide {

struct CheckResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

struct AcceptanceOptions {
  std::vector<std::uint64_t> guiding_seeds{1, 2, 3, 4, 5};
};

/// The acceptance criteria, each checked against an oracle written
/// independently of the code under test. Criterion 9 trains ten toy models.
CheckResult check_pattern_oracle();       // 1
CheckResult check_loss_identities();      // 2
CheckResult check_gradients();            // 3
CheckResult check_attention_rows();       // 4
CheckResult check_mask_statistics();      // 5
CheckResult check_statistics_oracles();   // 6
CheckResult check_partition_oracle();     // 7
CheckResult check_fix_accounting();       // 8
CheckResult check_guiding_effect(const AcceptanceOptions& options = {});  // 9
CheckResult check_sweep_plumbing();       // 10

/// Runs the given criteria (all when empty); exceptions become failures.
std::vector<CheckResult> run_checks(const std::vector<int>& ids = {},
                                    const AcceptanceOptions& options = {},
                                    const std::function<void(const CheckResult&)>& on_result = {});

std::string format_result(const CheckResult& r);

}  // namespace attnguide
