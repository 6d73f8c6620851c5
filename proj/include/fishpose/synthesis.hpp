#pragma once

#include "fishpose/geometry.hpp"
#include "fishpose/image.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace fishpose {

/// Head orientation in degrees.
struct EulerAngles {
  double pitch = 0.0;
  double yaw = 0.0;
  double roll = 0.0;

  bool operator==(const EulerAngles&) const = default;
};

bool within_pose_range(const EulerAngles& pose, double limit = 99.0);

/// Box in pixel-edge coordinates: covers [x, x + width) x [y, y + height).
struct PixelBox {
  double x = 0.0;
  double y = 0.0;
  double width = 0.0;
  double height = 0.0;

  bool operator==(const PixelBox&) const = default;
};

struct SourceSample {
  Image image;
  PixelBox face_box;
  std::vector<Eigen::Vector2d> landmarks;  // pixel coordinates, may be empty
  EulerAngles pose;
  std::string id;
};

struct FisheyeSample {
  Image image;  // output_size x output_size
  EulerAngles pose;
  PolarLocation location;
  std::string source_id;
  std::vector<Eigen::Vector2d> landmarks;  // crop pixel coordinates, may be empty
};

struct CanvasSpec {
  double scale = 5.0;
  Rgb fill = {128, 128, 128};
  double crop_margin = 1.2;
  int output_size = 224;
  int max_retries = 8;
};

/// Rigid marker rendered in place of a face: an upward arm, a forward arm and a
/// horizontal crossbar, each its own color. Symmetric only under left/right
/// mirroring, so every rotation yields a distinct view.
struct MarkerSpec {
  int render_size = 96;
  Rgb background = {128, 128, 128};
  double up_length = 1.0;
  double forward_length = 0.8;
  double crossbar_half_length = 0.6;
  double arm_radius = 0.12;
  double crossbar_radius = 0.1;
  double pitch_limit = 60.0;
  double yaw_limit = 60.0;
  double roll_limit = 45.0;
};

/// splitmix64 mixing of (seed, index) into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw.
double uniform01(std::mt19937_64& rng);

/// rho ~ U(0, 0.8), theta ~ U(-180, 180).
PolarLocation sample_placement(std::mt19937_64& rng);

struct Canvas {
  Image image;
  BoundingBox face_box;          // canvas-normalized coordinates
  Eigen::Vector2d paste_offset;  // source pixel -> canvas pixel translation
};

/// Pastes the face region of s onto a fill-colored square canvas of side
/// scale * max(face width, face height), centered at the polar location
/// (rho in units of the canvas half-width). Returns nullopt when the face
/// region would leave the canvas.
std::optional<Canvas> build_canvas(const SourceSample& s, const CanvasSpec& spec,
                                   const PolarLocation& loc);

/// Per-pixel inverse of the fisheye map for one canvas size; nullopt entries
/// lie outside the mapped region.
class WarpMap {
 public:
  explicit WarpMap(int side, const InverseOptions& opts = {});

  int side() const { return side_; }
  Image apply(const Image& canvas, const Rgb& fill) const;

 private:
  int side_;
  std::vector<std::optional<Eigen::Vector2d>> source_px_;
};

/// Thread-safe cache of WarpMap instances keyed by canvas side.
class FisheyeWarper {
 public:
  Image warp(const Image& canvas, const Rgb& fill);

 private:
  std::mutex mutex_;
  std::map<int, std::shared_ptr<const WarpMap>> maps_;
};

/// Destination-driven fisheye warp of a square canvas. Pixels with no
/// preimage in the canvas take the fill color.
Image warp_canvas(const Image& canvas, const Rgb& fill);

struct CropResult {
  Image image;
  double x0, y0, width, height;  // crop window in warped-image pixel-edge coordinates
};

/// Crops box (normalized in warped's frame) expanded by margin about its
/// center, clamped to the image, resized to output_size squared. nullopt if
/// the clamped window is empty.
std::optional<CropResult> crop_face(const Image& warped, const BoundingBox& box, double margin = 1.2,
                                    int output_size = 224);

/// Result of one synthesis attempt; canvas and warped image retained for
/// inspection.
struct SynthesisTrace {
  PolarLocation location;
  Canvas canvas;
  Image warped;
  BoundingBox fisheye_box;
  FisheyeSample sample;
};

std::optional<SynthesisTrace> synthesize_one(const SourceSample& source, const CanvasSpec& spec,
                                             std::uint64_t sample_seed, FisheyeWarper& warper);

struct SynthesisResult {
  std::vector<FisheyeSample> samples;
  std::vector<std::string> rejected;  // source ids skipped after the retry budget
};

/// One fisheye sample per source; the draws for source i come from
/// derive_seed(seed, i), so output is independent of processing order.
SynthesisResult synthesize_dataset(const std::vector<SourceSample>& sources, const CanvasSpec& spec,
                                   std::uint64_t seed);

/// Renders the marker at pose under weak-perspective projection.
Image render_marker(const EulerAngles& pose, const MarkerSpec& spec);

/// Tight box of pixels differing from the background.
PixelBox tight_box(const Image& image, const Rgb& background);

std::vector<SourceSample> generate_marker_dataset(int n, const MarkerSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Manifests: one JSON object per line.

struct ManifestRecord {
  std::string image_path;  // relative to the manifest's directory unless absolute
  EulerAngles pose;
  std::optional<PolarLocation> location;
  std::string source_id;
  std::optional<PixelBox> face_box;
  std::vector<Eigen::Vector2d> landmarks;

  bool operator==(const ManifestRecord&) const;
};

struct ManifestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_manifest(const std::vector<ManifestRecord>& records, const std::filesystem::path& path);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

/// Writes images as PNG under dir/images and the manifest to dir/manifest.jsonl.
void save_fisheye_dataset(const std::vector<FisheyeSample>& samples, const std::filesystem::path& dir);
void save_source_dataset(const std::vector<SourceSample>& samples, const std::filesystem::path& dir);

/// Loads a fisheye manifest; every record must carry a location.
std::vector<FisheyeSample> load_fisheye_dataset(const std::filesystem::path& manifest);
/// Loads a source manifest; a missing face_box means the whole image.
std::vector<SourceSample> load_source_dataset(const std::filesystem::path& manifest);

}  // namespace fishpose
