#include "gaternet/rng.hpp"

#include <sstream>

#include "gaternet/errors.hpp"

namespace gaternet {

std::string Rng::state() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream in(state);
  in >> engine_;
  if (in.fail()) throw FormatError("invalid rng state string");
}

Rng Rng::split(std::uint64_t tag) {
  const std::uint64_t draw = engine_();
  std::seed_seq seq{static_cast<std::uint32_t>(draw), static_cast<std::uint32_t>(draw >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  Rng child;
  child.engine_.seed(seq);
  return child;
}

}  // namespace gaternet
