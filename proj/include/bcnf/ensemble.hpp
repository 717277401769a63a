#pragma once

#include <string>
#include <vector>

#include "bcnf/net.hpp"

namespace bcnf {

enum class Provenance { vib, mcmc, oracle };

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::vib: return "vib";
    case Provenance::mcmc: return "mcmc";
    case Provenance::oracle: return "oracle";
  }
  return "unknown";
}

/// A set of weight vectors drawn from (an approximation of) the posterior.
struct PosteriorEnsemble {
  std::vector<ParamVector> members;
  Provenance provenance = Provenance::mcmc;

  std::size_t size() const { return members.size(); }
};

}  // namespace bcnf
