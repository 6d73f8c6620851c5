#include "fishpose/synthesis.hpp"

#include <Eigen/Geometry>
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace fishpose {

bool within_pose_range(const EulerAngles& pose, double limit) {
  return std::abs(pose.pitch) <= limit && std::abs(pose.yaw) <= limit && std::abs(pose.roll) <= limit;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

PolarLocation sample_placement(std::mt19937_64& rng) {
  const double rho = 0.8 * uniform01(rng);
  const double theta = -180.0 + 360.0 * uniform01(rng);
  return {theta, rho};
}

std::optional<Canvas> build_canvas(const SourceSample& s, const CanvasSpec& spec, const PolarLocation& loc) {
  if (!(spec.scale >= 2.0)) throw std::invalid_argument("build_canvas: canvas scale must be >= 2");
  if (!(loc.rho >= 0.0 && loc.rho <= 0.8)) throw std::invalid_argument("build_canvas: rho outside [0, 0.8]");

  const int sx0 = static_cast<int>(std::lround(s.face_box.x));
  const int sy0 = static_cast<int>(std::lround(s.face_box.y));
  const int sw = static_cast<int>(std::lround(s.face_box.width));
  const int sh = static_cast<int>(std::lround(s.face_box.height));
  if (sw < 1 || sh < 1 || sx0 < 0 || sy0 < 0 || sx0 + sw > s.image.width() || sy0 + sh > s.image.height()) {
    throw std::invalid_argument("build_canvas: face box outside source image (" + s.id + ")");
  }

  const int side = static_cast<int>(std::lround(spec.scale * std::max(sw, sh)));
  const ImageGeometry geom(side, side);
  const Eigen::Vector2d center_px = geom.to_pixel(from_polar(loc)).array() + 0.5;  // pixel-edge coords
  const int dx0 = static_cast<int>(std::lround(center_px.x() - sw / 2.0));
  const int dy0 = static_cast<int>(std::lround(center_px.y() - sh / 2.0));
  if (dx0 < 0 || dy0 < 0 || dx0 + sw > side || dy0 + sh > side) return std::nullopt;

  Canvas canvas{Image(side, side, spec.fill), {}, Eigen::Vector2d(dx0 - sx0, dy0 - sy0)};
  for (int r = 0; r < sh; ++r) {
    for (int c = 0; c < sw; ++c) canvas.image.set_pixel(dx0 + c, dy0 + r, s.image.pixel(sx0 + c, sy0 + r));
  }

  const double half = side / 2.0;
  const Point2d lo((dx0 - half) / half, (half - (dy0 + sh)) / half);
  const Point2d hi((dx0 + sw - half) / half, (half - dy0) / half);
  canvas.face_box = BoundingBox::from_corners(lo, hi);
  return canvas;
}

WarpMap::WarpMap(int side, const InverseOptions& opts) : side_(side) {
  const ImageGeometry geom(side, side);
  source_px_.resize(static_cast<std::size_t>(side) * side);
  for (int row = 0; row < side; ++row) {
    for (int col = 0; col < side; ++col) {
      const auto p = fisheye_inverse(geom.to_normalized(col, row), opts);
      if (p) source_px_[static_cast<std::size_t>(row) * side + col] = geom.to_pixel(*p);
    }
  }
}

Image WarpMap::apply(const Image& canvas, const Rgb& fill) const {
  if (canvas.width() != side_ || canvas.height() != side_) {
    throw std::invalid_argument("WarpMap::apply: canvas size mismatch");
  }
  Image out(side_, side_, fill);
  for (int row = 0; row < side_; ++row) {
    for (int col = 0; col < side_; ++col) {
      const auto& src = source_px_[static_cast<std::size_t>(row) * side_ + col];
      if (src) out.set_pixel(col, row, to_rgb(sample_bilinear(canvas, src->x(), src->y())));
    }
  }
  return out;
}

Image FisheyeWarper::warp(const Image& canvas, const Rgb& fill) {
  if (canvas.width() != canvas.height()) throw std::invalid_argument("warp: canvas must be square");
  std::shared_ptr<const WarpMap> map;
  {
    std::lock_guard lock(mutex_);
    auto it = maps_.find(canvas.width());
    if (it == maps_.end()) it = maps_.emplace(canvas.width(), std::make_shared<WarpMap>(canvas.width())).first;
    map = it->second;
  }
  return map->apply(canvas, fill);
}

Image warp_canvas(const Image& canvas, const Rgb& fill) {
  if (canvas.width() != canvas.height()) throw std::invalid_argument("warp_canvas: canvas must be square");
  return WarpMap(canvas.width()).apply(canvas, fill);
}

std::optional<CropResult> crop_face(const Image& warped, const BoundingBox& box, double margin, int output_size) {
  const ImageGeometry geom(warped.width(), warped.height());
  const Eigen::Vector2d center = geom.to_pixel(box.center).array() + 0.5;
  const double hw = margin * box.half_width * warped.width() / 2.0;
  const double hh = margin * box.half_height * warped.height() / 2.0;
  const double x0 = std::clamp(center.x() - hw, 0.0, static_cast<double>(warped.width()));
  const double x1 = std::clamp(center.x() + hw, 0.0, static_cast<double>(warped.width()));
  const double y0 = std::clamp(center.y() - hh, 0.0, static_cast<double>(warped.height()));
  const double y1 = std::clamp(center.y() + hh, 0.0, static_cast<double>(warped.height()));
  if (!(x1 > x0) || !(y1 > y0)) return std::nullopt;
  return CropResult{resample_region(warped, x0, y0, x1 - x0, y1 - y0, output_size, output_size), x0, y0,
                    x1 - x0, y1 - y0};
}

std::optional<SynthesisTrace> synthesize_one(const SourceSample& source, const CanvasSpec& spec,
                                             std::uint64_t sample_seed, FisheyeWarper& warper) {
  std::mt19937_64 rng(sample_seed);
  for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
    const PolarLocation loc = sample_placement(rng);
    auto canvas = build_canvas(source, spec, loc);
    if (!canvas) continue;
    Image warped = warper.warp(canvas->image, spec.fill);
    const BoundingBox fisheye_box = transport_box(canvas->face_box);
    auto crop = crop_face(warped, fisheye_box, spec.crop_margin, spec.output_size);
    if (!crop) continue;

    FisheyeSample sample{std::move(crop->image), source.pose, loc, source.id, {}};
    if (!source.landmarks.empty()) {
      const ImageGeometry geom(canvas->image.width(), canvas->image.height());
      for (const auto& lm : source.landmarks) {
        const Eigen::Vector2d canvas_px = lm + canvas->paste_offset;
        const Point2d q = fisheye_forward(geom.to_normalized(canvas_px.x(), canvas_px.y()));
        const Eigen::Vector2d warped_px = geom.to_pixel(q);
        sample.landmarks.emplace_back((warped_px.x() + 0.5 - crop->x0) * spec.output_size / crop->width - 0.5,
                                      (warped_px.y() + 0.5 - crop->y0) * spec.output_size / crop->height - 0.5);
      }
    }
    return SynthesisTrace{loc, std::move(*canvas), std::move(warped), fisheye_box, std::move(sample)};
  }
  return std::nullopt;
}

SynthesisResult synthesize_dataset(const std::vector<SourceSample>& sources, const CanvasSpec& spec,
                                   std::uint64_t seed) {
  if (sources.empty()) throw std::invalid_argument("synthesize_dataset: no sources");
  FisheyeWarper warper;
  SynthesisResult result;
  result.samples.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    auto trace = synthesize_one(sources[i], spec, derive_seed(seed, i), warper);
    if (trace) {
      result.samples.push_back(std::move(trace->sample));
    } else {
      result.rejected.push_back(sources[i].id);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Marker rendering

namespace {

struct Segment {
  Eigen::Vector3d a, b;
  double radius;
  Eigen::Vector3d color;
};

constexpr double kMarkerExtent = 1.25;

}  // namespace

Image render_marker(const EulerAngles& pose, const MarkerSpec& spec) {
  const Eigen::Matrix3d rot = (Eigen::AngleAxisd(radians(pose.roll), Eigen::Vector3d::UnitZ()) *
                               Eigen::AngleAxisd(radians(pose.yaw), Eigen::Vector3d::UnitY()) *
                               Eigen::AngleAxisd(radians(pose.pitch), Eigen::Vector3d::UnitX()))
                                  .toRotationMatrix();

  const Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  std::vector<Segment> segments = {
      {origin, Eigen::Vector3d(0, spec.up_length, 0), spec.arm_radius, {220, 50, 40}},
      {origin, Eigen::Vector3d(0, 0, spec.forward_length), spec.arm_radius, {40, 80, 225}},
      {origin, Eigen::Vector3d(-spec.crossbar_half_length, 0, 0), spec.crossbar_radius, {50, 190, 70}},
      {origin, Eigen::Vector3d(spec.crossbar_half_length, 0, 0), spec.crossbar_radius, {50, 190, 70}},
  };
  for (auto& s : segments) {
    s.a = rot * s.a;
    s.b = rot * s.b;
  }

  const int size = spec.render_size;
  const double px_per_unit = size / 2.0 / kMarkerExtent;
  const Eigen::Vector3d background(spec.background[0], spec.background[1], spec.background[2]);
  Image out(size, size, spec.background);

  struct Hit {
    double depth, coverage;
    const Segment* seg;
  };
  std::vector<Hit> hits;
  for (int row = 0; row < size; ++row) {
    for (int col = 0; col < size; ++col) {
      const Eigen::Vector2d p((col + 0.5 - size / 2.0) / px_per_unit, (size / 2.0 - row - 0.5) / px_per_unit);
      hits.clear();
      for (const auto& s : segments) {
        const Eigen::Vector2d a = s.a.head<2>();
        const Eigen::Vector2d ab = s.b.head<2>() - a;
        const double len2 = ab.squaredNorm();
        // a segment seen end-on projects to a point; its near end is the visible one
        const double t = len2 > 1e-12 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : (s.b.z() > s.a.z() ? 1.0 : 0.0);
        const double d = (p - (a + t * ab)).norm();
        const double coverage = std::clamp((s.radius - d) * px_per_unit + 0.5, 0.0, 1.0);
        if (coverage <= 0.0) continue;
        const double surface = std::sqrt(std::max(0.0, s.radius * s.radius - d * d));
        hits.push_back({s.a.z() + t * (s.b.z() - s.a.z()) + surface, coverage, &s});
      }
      if (hits.empty()) continue;
      std::stable_sort(hits.begin(), hits.end(), [](const Hit& x, const Hit& y) { return x.depth < y.depth; });
      Eigen::Vector3d color = background;
      for (const auto& h : hits) {
        // Nearer surfaces are brighter so front and back views differ.
        const double shade = 0.55 + 0.45 * std::clamp((h.depth + kMarkerExtent) / (2 * kMarkerExtent), 0.0, 1.0);
        color = (1.0 - h.coverage) * color + h.coverage * shade * h.seg->color;
      }
      out.set_pixel(col, row, to_rgb(color));
    }
  }
  return out;
}

PixelBox tight_box(const Image& image, const Rgb& background) {
  int c0 = image.width(), r0 = image.height(), c1 = -1, r1 = -1;
  for (int r = 0; r < image.height(); ++r) {
    for (int c = 0; c < image.width(); ++c) {
      if (image.pixel(c, r) == background) continue;
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
    }
  }
  if (c1 < 0) return {0.0, 0.0, static_cast<double>(image.width()), static_cast<double>(image.height())};
  return {static_cast<double>(c0), static_cast<double>(r0), static_cast<double>(c1 - c0 + 1),
          static_cast<double>(r1 - r0 + 1)};
}

std::vector<SourceSample> generate_marker_dataset(int n, const MarkerSpec& spec, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_marker_dataset: n must be >= 1");
  std::vector<SourceSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    EulerAngles pose;
    pose.pitch = spec.pitch_limit * (2.0 * uniform01(rng) - 1.0);
    pose.yaw = spec.yaw_limit * (2.0 * uniform01(rng) - 1.0);
    pose.roll = spec.roll_limit * (2.0 * uniform01(rng) - 1.0);
    Image image = render_marker(pose, spec);
    const PixelBox box = tight_box(image, spec.background);
    char id[32];
    std::snprintf(id, sizeof id, "marker_%06d", i);
    out.push_back({std::move(image), box, {}, pose, id});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

bool ManifestRecord::operator==(const ManifestRecord& o) const {
  const auto loc_eq = [](const std::optional<PolarLocation>& a, const std::optional<PolarLocation>& b) {
    if (a.has_value() != b.has_value()) return false;
    return !a || (a->theta == b->theta && a->rho == b->rho);
  };
  return image_path == o.image_path && pose == o.pose && loc_eq(location, o.location) &&
         source_id == o.source_id && face_box == o.face_box && landmarks == o.landmarks;
}

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json to_json(const ManifestRecord& r) {
  ordered_json j;
  j["image_path"] = r.image_path;
  j["pitch"] = r.pose.pitch;
  j["yaw"] = r.pose.yaw;
  j["roll"] = r.pose.roll;
  if (r.location) {
    j["theta"] = r.location->theta;
    j["rho"] = r.location->rho;
  }
  j["source_id"] = r.source_id;
  if (r.face_box) j["face_box"] = {r.face_box->x, r.face_box->y, r.face_box->width, r.face_box->height};
  if (!r.landmarks.empty()) {
    ordered_json lms = ordered_json::array();
    for (const auto& lm : r.landmarks) lms.push_back({lm.x(), lm.y()});
    j["landmarks"] = lms;
  }
  return j;
}

double finite_number(const ordered_json& j, const char* key, double lo, double hi) {
  if (!j.contains(key)) throw std::runtime_error(std::string("missing field '") + key + "'");
  const auto& v = j.at(key);
  if (!v.is_number()) throw std::runtime_error(std::string("field '") + key + "' is not a finite number");
  const double x = v.get<double>();
  if (!std::isfinite(x) || x < lo || x > hi) {
    throw std::runtime_error(std::string("field '") + key + "' out of range");
  }
  return x;
}

ManifestRecord from_json(const ordered_json& j) {
  if (!j.is_object()) throw std::runtime_error("record is not an object");
  ManifestRecord r;
  if (!j.contains("image_path") || !j["image_path"].is_string()) throw std::runtime_error("missing image_path");
  r.image_path = j["image_path"].get<std::string>();
  r.pose.pitch = finite_number(j, "pitch", -180.0, 180.0);
  r.pose.yaw = finite_number(j, "yaw", -180.0, 180.0);
  r.pose.roll = finite_number(j, "roll", -180.0, 180.0);
  const bool has_theta = j.contains("theta");
  const bool has_rho = j.contains("rho");
  if (has_theta != has_rho) throw std::runtime_error("theta and rho must appear together");
  if (has_theta) {
    PolarLocation loc{finite_number(j, "theta", -180.0, 180.0), finite_number(j, "rho", 0.0, 1.0)};
    if (!(loc.rho < 1.0)) throw std::runtime_error("field 'rho' out of range");
    r.location = loc;
  }
  if (j.contains("source_id")) {
    if (!j["source_id"].is_string()) throw std::runtime_error("source_id is not a string");
    r.source_id = j["source_id"].get<std::string>();
  }
  if (j.contains("face_box")) {
    const auto& b = j["face_box"];
    if (!b.is_array() || b.size() != 4) throw std::runtime_error("face_box must be [x, y, width, height]");
    PixelBox box;
    for (std::size_t k = 0; k < 4; ++k) {
      if (!b[k].is_number()) throw std::runtime_error("face_box entries must be numbers");
    }
    box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
    if (!(box.width > 0 && box.height > 0)) throw std::runtime_error("face_box extents must be positive");
    r.face_box = box;
  }
  if (j.contains("landmarks")) {
    for (const auto& lm : j["landmarks"]) {
      if (!lm.is_array() || lm.size() != 2 || !lm[0].is_number() || !lm[1].is_number()) {
        throw std::runtime_error("landmarks must be [[x, y], ...]");
      }
      r.landmarks.emplace_back(lm[0].get<double>(), lm[1].get<double>());
    }
  }
  return r;
}

std::filesystem::path resolve(const std::filesystem::path& manifest, const std::string& image_path) {
  const std::filesystem::path p(image_path);
  return p.is_absolute() ? p : manifest.parent_path() / p;
}

std::string image_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "images/%06zu.png", index);
  return buf;
}

}  // namespace

void write_manifest(const std::vector<ManifestRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ManifestError("cannot write manifest " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw ManifestError("write failed: " + path.string());
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  std::vector<ManifestRecord> records;
  std::string line;
  for (int line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(from_json(ordered_json::parse(line)));
    } catch (const std::exception& e) {
      throw ManifestError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

void save_fisheye_dataset(const std::vector<FisheyeSample>& samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::vector<ManifestRecord> records;
  records.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    ManifestRecord r{image_name(i), s.pose, s.location, s.source_id, std::nullopt, s.landmarks};
    write_png(s.image, dir / r.image_path);
    records.push_back(std::move(r));
  }
  write_manifest(records, dir / "manifest.jsonl");
}

void save_source_dataset(const std::vector<SourceSample>& samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::vector<ManifestRecord> records;
  records.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    ManifestRecord r{image_name(i), s.pose, std::nullopt, s.id, s.face_box, s.landmarks};
    write_png(s.image, dir / r.image_path);
    records.push_back(std::move(r));
  }
  write_manifest(records, dir / "manifest.jsonl");
}

std::vector<FisheyeSample> load_fisheye_dataset(const std::filesystem::path& manifest) {
  std::vector<FisheyeSample> out;
  const auto records = read_manifest(manifest);
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!r.location) {
      throw ManifestError(manifest.string() + ":" + std::to_string(i + 1) + ": record lacks theta/rho");
    }
    out.push_back({read_png(resolve(manifest, r.image_path)), r.pose, *r.location, r.source_id, r.landmarks});
  }
  return out;
}

std::vector<SourceSample> load_source_dataset(const std::filesystem::path& manifest) {
  std::vector<SourceSample> out;
  for (const auto& r : read_manifest(manifest)) {
    Image image = read_png(resolve(manifest, r.image_path));
    const PixelBox box = r.face_box.value_or(
        PixelBox{0.0, 0.0, static_cast<double>(image.width()), static_cast<double>(image.height())});
    out.push_back({std::move(image), box, r.landmarks, r.pose, r.source_id});
  }
  return out;
}

}  // namespace fishpose
