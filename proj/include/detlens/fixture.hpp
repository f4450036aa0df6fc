#pragma once

#include <cstdint>
#include <filesystem>

namespace detlens {

struct SyntheticFixture {
  std::filesystem::path manifest;         // ground truth, manifest.jsonl
  std::filesystem::path reference;        // what the mock detector sees, reference.jsonl
  std::filesystem::path detector_config;  // mock.json
};

/// Writes a small person-detection dataset with known failure modes:
/// image i gets scenario i % 5 (correct, under-, over-detection,
/// mislocalization, box hanging out of frame). Images are PNG, 96x72.
SyntheticFixture write_synthetic_fixture(const std::filesystem::path& dir, std::size_t num_images = 50,
                                         std::uint64_t seed = 7);

}  // namespace detlens
