#include "via/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace via {

namespace {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;

uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

} // namespace

Rng::Rng(uint64_t seed) : state_(mix64(seed ^ kGolden)) {}

Rng Rng::derive(std::string_view name) const {
    Rng child(0);
    child.state_ = mix64(state_ ^ fnv1a(name));
    return child;
}

Rng Rng::derive(std::string_view name, uint64_t index) const {
    Rng child(0);
    child.state_ = mix64(mix64(state_ ^ fnv1a(name)) + (index + 1) * kGolden);
    return child;
}

uint64_t Rng::next_u64() {
    state_ += kGolden;
    return mix64(state_);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 shifted away from zero so log() is finite.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

int Rng::randint(int n) {
    if (n < 1) throw std::invalid_argument("Rng::randint: n must be >= 1");
    // Rejection-free modulo bias is ~2^-64 * n here; negligible for n used in
    // this project, and keeps the stream layout simple.
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
}

} // namespace via
