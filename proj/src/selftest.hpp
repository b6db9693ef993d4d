#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace attrib {

struct SelftestCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct SelftestReport {
    std::vector<SelftestCheck> checks;
    bool all_passed = false;
};

// Full invariant suite over randomized micro-models: conservation of the
// relevance chain, binary-split identities, skip-connection normalization,
// the classic-rule conservation violation, and a finite-difference gradient
// check. inject_fault disables binary-split normalization so the matmul
// conservation check must fail — a hook for testing the harness itself.
SelftestReport run_selftest(bool inject_fault = false, std::uint64_t seed = 1);

// One line per check plus a summary line.
std::string selftest_to_text(const SelftestReport& report);

}  // namespace attrib
