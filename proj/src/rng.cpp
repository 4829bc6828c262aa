#include "distillforge/rng.hpp"

#include <sstream>

namespace distillforge {

std::string Rng::state() const {
    std::ostringstream os;
    os.precision(17);
    os << engine_ << ' ' << has_spare_ << ' ' << spare_;
    return os.str();
}

void Rng::restore(const std::string& s) {
    std::istringstream is(s);
    is >> engine_ >> has_spare_ >> spare_;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace distillforge
