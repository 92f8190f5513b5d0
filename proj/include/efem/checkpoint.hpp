#pragma once

#include <filesystem>
#include <memory>

#include <json.hpp>

#include "efem/learned_prior.hpp"
#include "efem/prior.hpp"

namespace efem {

// Container layout: "EFEMCKPT", u32 format version, u32 header length, JSON
// header, then raw little-endian float32 payload in header order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const LearnedPrior& prior);
std::unique_ptr<LearnedPrior> load_checkpoint(const std::filesystem::path& path);

/// Library entries are stored as theta_R, theta_inv, theta_c, theta_s per entry.
void save_library(const std::filesystem::path& path, const LatentLibrary& library);
LatentLibrary load_library(const std::filesystem::path& path);

/// JSON header of any container file plus payload size, for inspection.
nlohmann::json inspect_container(const std::filesystem::path& path);

}  // namespace efem
