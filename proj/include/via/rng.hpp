#pragma once

#include <cstdint>
#include <string_view>

namespace via {

// Deterministic, portable random stream. All randomness in the project flows
// from one root seed through named derive() chains (train / tta / sampling /
// augment), so paired experiments can share or isolate streams explicitly.
// Core generator is splitmix64; no libc/std distributions are used so the
// byte-for-byte output is identical across platforms and standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed);

    // Independent child stream identified by name (and optional index).
    Rng derive(std::string_view name) const;
    Rng derive(std::string_view name, uint64_t index) const;

    uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);   // [lo, hi)
    double normal();                        // standard normal, Box-Muller
    int randint(int n);                     // [0, n), n >= 1

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace via
