#pragma once

#include <filesystem>
#include <iosfwd>

#include "mmo/mixed_model.hpp"

namespace mmo {

inline constexpr int kModelSchemaVersion = 1;

/// Versioned JSON. Each component carries its design matrices and theta_hat;
/// loading rebuilds every estimate from them, so a reloaded model draws the
/// same parameters as the original. Doubles round-trip exactly.
void save_model(std::ostream& out, const FittedModel& model);
FittedModel load_model(std::istream& in);

void save_model(const std::filesystem::path& path, const FittedModel& model);
FittedModel load_model(const std::filesystem::path& path);

}  // namespace mmo
