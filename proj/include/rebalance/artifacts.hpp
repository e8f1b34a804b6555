#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rebalance/confidence.hpp"
#include "rebalance/steering.hpp"
#include "rebalance/surface.hpp"

namespace rebalance::artifacts {

inline constexpr int kSteeringVersion = 1;
inline constexpr int kSurfaceVersion = 1;

struct LabelCounts {
  std::size_t overthink = 0;
  std::size_t underthink = 0;
  std::size_t normal = 0;

  bool operator==(const LabelCounts&) const = default;
};

struct SteeringArtifact {
  steering::SteeringVector vector;
  steering::BoundaryDistances distances;
  LabelCounts counts;
  // provenance
  std::vector<std::string> trace_ids;
  stats::Thresholds thresholds;
  std::size_t window = 2;
  std::optional<double> robust_quantile;
};

struct SurfaceArtifact {
  surface::ControlSurface surface;
  trace::LayerId layer = 0;
  std::string steering_hash;  // sha256 of the steering artifact bytes it was fit from
  std::string corpus_id;
  std::uint64_t seed = 42;
  surface::BuildDiagnostics diagnostics;
};

/// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);

/// Canonical single-line JSON plus trailing newline.
std::string write_steering(const SteeringArtifact& a);
SteeringArtifact read_steering(std::string_view bytes);

std::string write_surface(const SurfaceArtifact& a);
SurfaceArtifact read_surface(std::string_view bytes);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace rebalance::artifacts
