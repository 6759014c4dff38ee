#pragma once

namespace vlalab {

inline constexpr const char* kToolVersion = "0.1.0";

// Bumped whenever dataset bytes would change for a fixed seed.
inline constexpr int kGeneratorVersion = 1;

// Bumped whenever the checkpoint manifest layout changes.
inline constexpr int kCheckpointFormat = 1;

} // namespace vlalab
