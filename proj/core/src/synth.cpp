// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include "dmsn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "dmsn/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dmsn {

namespace {

constexpr double kMaxObjectIou = 0.3;  // beyond this, placement is resampled

uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t file_checksum(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return fnv1a64(buf.data(), buf.size());
}

// 3x3 hue rotation about the luminance axis (YIQ-derived constants).
std::array<std::array<double, 3>, 3> hue_matrix(double deg) {
  const double a = deg * M_PI / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  return {{{0.299 + 0.701 * c + 0.168 * s, 0.587 - 0.587 * c + 0.330 * s,
            0.114 - 0.114 * c - 0.497 * s},
           {0.299 - 0.299 * c - 0.328 * s, 0.587 + 0.413 * c + 0.035 * s,
            0.114 - 0.114 * c + 0.292 * s},
           {0.299 - 0.300 * c + 1.250 * s, 0.587 - 0.588 * c - 1.050 * s,
            0.114 + 0.886 * c - 0.203 * s}}};
}

struct ShapeObj {
  int class_id;
  double cx, cy, size;  // size = full extent in pixels
  std::array<double, 3> color;
  Box bounds() const { return {cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2}; }
};

// Coverage of a pixel center by the shape, 2x2 supersampled.
double shape_coverage(const std::string& kind, const ShapeObj& o, int px, int py) {
  int hits = 0;
  for (int sy = 0; sy < 2; ++sy) {
    for (int sx = 0; sx < 2; ++sx) {
      const double x = px + 0.25 + 0.5 * sx;
      const double y = py + 0.25 + 0.5 * sy;
      const double dx = x - o.cx, dy = y - o.cy;
      const double r = o.size / 2;
      bool in = false;
      if (kind == "circle") {
        in = dx * dx + dy * dy <= r * r;
      } else if (kind == "square") {
        in = std::fabs(dx) <= r && std::fabs(dy) <= r;
      } else if (kind == "triangle") {
        // upright isoceles triangle inscribed in the bounding square
        const double ny = (dy + r) / o.size;  // 0 at apex row, 1 at base
        in = ny >= 0 && ny <= 1 && std::fabs(dx) <= r * ny;
      } else {
        throw ConfigError("unknown shape kind: " + kind);
      }
      hits += in ? 1 : 0;
    }
  }
  return hits / 4.0;
}

std::array<double, 3> class_color(int class_id, std::mt19937_64& rng) {
  static const std::array<std::array<double, 3>, 6> base = {{{0.90, 0.20, 0.20},
                                                             {0.20, 0.85, 0.25},
                                                             {0.25, 0.35, 0.95},
                                                             {0.92, 0.85, 0.20},
                                                             {0.85, 0.25, 0.85},
                                                             {0.20, 0.85, 0.85}}};
  std::uniform_real_distribution<double> jit(-0.08, 0.08);
  auto c = base[static_cast<size_t>(class_id) % base.size()];
  for (auto& v : c) v = std::clamp(v + jit(rng), 0.0, 1.0);
  return c;
}

ImageSample render_image(const DomainSpec& spec, const std::string& sample_id, uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int H = spec.image_h, W = spec.image_w;
  Tensor img({3, H, W});

  // background: gradient between two palette colors along a random direction
  std::uniform_int_distribution<size_t> pick(0, spec.appearance.background_palette.size() - 1);
  const auto ca = spec.appearance.background_palette[pick(rng)];
  const auto cb = spec.appearance.background_palette[pick(rng)];
  std::uniform_real_distribution<double> ang(0, 2 * M_PI);
  const double theta = ang(rng);
  const double gx = std::cos(theta), gy = std::sin(theta);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double t = 0.5 + 0.5 * ((x - W / 2.0) / W * gx + (y - H / 2.0) / H * gy) * 2.0;
      t = std::clamp(t, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img.at3(c, y, x) = ca[static_cast<size_t>(c)] * (1 - t) + cb[static_cast<size_t>(c)] * t;
    }
  }

  // objects
  std::uniform_int_distribution<int> nobj_dist(spec.objects_min, spec.objects_max);
  const int nobj = nobj_dist(rng);
  const double smin = 0.18 * std::min(H, W), smax = 0.42 * std::min(H, W);
  std::uniform_int_distribution<int> cls_dist(0, static_cast<int>(spec.classes.size()) - 1);
  std::uniform_real_distribution<double> size_dist(smin, smax);
  std::vector<ShapeObj> objs;
  for (int k = 0; k < nobj; ++k) {
    ShapeObj o{};
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      o.class_id = cls_dist(rng);
      o.size = size_dist(rng);
      std::uniform_real_distribution<double> px(o.size / 2 + 1, W - o.size / 2 - 1);
      std::uniform_real_distribution<double> py(o.size / 2 + 1, H - o.size / 2 - 1);
      o.cx = px(rng);
      o.cy = py(rng);
      placed = true;
      for (const auto& other : objs) {
        if (iou(o.bounds(), other.bounds()) > kMaxObjectIou) {
          placed = false;
          break;
        }
      }
    }
    if (!placed) continue;  // rare; keeps the count within [min, max]
    o.color = class_color(o.class_id, rng);
    objs.push_back(o);
  }

  std::vector<BoxAnnotation> boxes;
  for (const auto& o : objs) {
    const std::string& kind = spec.classes[static_cast<size_t>(o.class_id)];
    const Box b = o.bounds();
    const int x0 = std::max(0, static_cast<int>(std::floor(b.x1)));
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(b.x2)));
    const int y0 = std::max(0, static_cast<int>(std::floor(b.y1)));
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(b.y2)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double cov = shape_coverage(kind, o, x, y);
        if (cov <= 0) continue;
        for (int c = 0; c < 3; ++c)
          img.at3(c, y, x) = img.at3(c, y, x) * (1 - cov) + o.color[static_cast<size_t>(c)] * cov;
      }
    }
    boxes.push_back({o.class_id, clip_box(b, W, H)});
  }

  // domain appearance: brightness, hue rotation, noise; then 8-bit quantization
  const auto hm = hue_matrix(spec.appearance.hue_rotation_deg);
  std::normal_distribution<double> noise(0.0, spec.appearance.noise_sigma);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double r = img.at3(0, y, x) + spec.appearance.brightness_shift;
      double g = img.at3(1, y, x) + spec.appearance.brightness_shift;
      double b = img.at3(2, y, x) + spec.appearance.brightness_shift;
      double rr = hm[0][0] * r + hm[0][1] * g + hm[0][2] * b;
      double gg = hm[1][0] * r + hm[1][1] * g + hm[1][2] * b;
      double bb = hm[2][0] * r + hm[2][1] * g + hm[2][2] * b;
      if (spec.appearance.noise_sigma > 0) {
        rr += noise(rng);
        gg += noise(rng);
        bb += noise(rng);
      }
      img.at3(0, y, x) = std::round(std::clamp(rr, 0.0, 1.0) * 255.0) / 255.0;
      img.at3(1, y, x) = std::round(std::clamp(gg, 0.0, 1.0) * 255.0) / 255.0;
      img.at3(2, y, x) = std::round(std::clamp(bb, 0.0, 1.0) * 255.0) / 255.0;
    }
  }

  ImageSample s;
  s.pixels = std::move(img);
  s.domain_id = spec.domain_id;
  s.boxes = std::move(boxes);
  s.sample_id = sample_id;
  return s;
}

void validate_specs(const std::vector<DomainSpec>& specs) {
  if (specs.empty()) throw ConfigError("no domain specs");
  for (const auto& s : specs) {
    if (s.image_h <= 0 || s.image_w <= 0) throw ConfigError("zero-area image");
    if (s.classes.empty()) throw ConfigError("empty class list");
    if (s.classes != specs[0].classes)
      throw ConfigError("all domains must share one class list");
    if (s.image_h != specs[0].image_h || s.image_w != specs[0].image_w)
      throw ConfigError("all domains must share one image size");
    if (s.objects_min < 0 || s.objects_max < s.objects_min)
      throw ConfigError("bad objects_per_image range");
    if (s.appearance.background_palette.empty())
      throw ConfigError("empty background palette");
    if (s.num_images <= 0) throw ConfigError("num_images must be positive");
  }
}

json appearance_to_json(const Appearance& a) {
  return json{{"background_palette", a.background_palette},
              {"brightness_shift", a.brightness_shift},
              {"noise_sigma", a.noise_sigma},
              {"hue_rotation", a.hue_rotation_deg}};
}

Appearance appearance_from_json(const json& j) {
  Appearance a;
  for (const auto& c : j.at("background_palette"))
    a.background_palette.push_back({c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()});
  a.brightness_shift = j.at("brightness_shift").get<double>();
  a.noise_sigma = j.at("noise_sigma").get<double>();
  a.hue_rotation_deg = j.at("hue_rotation").get<double>();
  return a;
}

cv::Mat to_mat(const Tensor& pixels) {
  const int H = pixels.dim(1), W = pixels.dim(2);
  cv::Mat m(H, W, CV_8UC3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      auto& px = m.at<cv::Vec3b>(y, x);
      // OpenCV is BGR
      px[0] = static_cast<unsigned char>(std::lround(pixels.at3(2, y, x) * 255.0));
      px[1] = static_cast<unsigned char>(std::lround(pixels.at3(1, y, x) * 255.0));
      px[2] = static_cast<unsigned char>(std::lround(pixels.at3(0, y, x) * 255.0));
    }
  }
  return m;
}

Tensor from_mat(const cv::Mat& m) {
  Tensor t({3, m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y) {
    for (int x = 0; x < m.cols; ++x) {
      const auto& px = m.at<cv::Vec3b>(y, x);
      t.at3(0, y, x) = px[2] / 255.0;
      t.at3(1, y, x) = px[1] / 255.0;
      t.at3(2, y, x) = px[0] / 255.0;
    }
  }
  return t;
}

}  // namespace

uint64_t sample_seed(uint64_t dataset_seed, const std::string& sample_id) {
  uint64_t h = fnv1a64(&dataset_seed, sizeof(dataset_seed));
  return fnv1a64(sample_id.data(), sample_id.size(), h);
}

Dataset generate_dataset(const std::vector<DomainSpec>& specs, uint64_t seed) {
  validate_specs(specs);
  Dataset out;
  for (const auto& spec : specs) {
    std::vector<ImageSample>& samples = out[spec.domain_id];
    for (int i = 0; i < spec.num_images; ++i) {
      const std::string sid = "d" + std::to_string(spec.domain_id) + "_" + std::to_string(i);
      samples.push_back(render_image(spec, sid, sample_seed(seed, sid)));
    }
  }
  return out;
}

std::string save_dataset(const Dataset& dataset, const std::vector<DomainSpec>& specs,
                         const std::string& root) {
  validate_specs(specs);
  fs::create_directories(root);
  json manifest;
  manifest["schema_version"] = 1;
  manifest["classes"] = specs[0].classes;
  json domains = json::array();
  for (const auto& spec : specs) {
    auto it = dataset.find(spec.domain_id);
    if (it == dataset.end()) throw ContractError("dataset missing domain " + std::to_string(spec.domain_id));
    const auto& samples = it->second;
    const fs::path ddir = fs::path(root) / std::to_string(spec.domain_id);
    fs::create_directories(ddir);

    json files = json::object();
    std::ofstream ann(ddir / "annotations.jsonl");
    for (const auto& s : samples) {
      const std::string png = (ddir / (s.sample_id + ".png")).string();
      if (!cv::imwrite(png, to_mat(s.pixels))) throw IoError("failed to write " + png);
      files[s.sample_id + ".png"] = file_checksum(png);
      json rec;
      rec["sample_id"] = s.sample_id;
      json boxes = json::array();
      for (const auto& b : s.boxes)
        boxes.push_back({{"class_id", b.class_id}, {"box", {b.box.x1, b.box.y1, b.box.x2, b.box.y2}}});
      rec["boxes"] = boxes;
      ann << rec.dump() << "\n";
    }
    ann.close();
    files["annotations.jsonl"] = file_checksum((ddir / "annotations.jsonl").string());

    json d;
    d["domain_id"] = spec.domain_id;
    d["num_images"] = static_cast<int>(samples.size());
    d["image_size"] = {spec.image_h, spec.image_w};
    d["appearance"] = appearance_to_json(spec.appearance);
    d["objects_per_image"] = {spec.objects_min, spec.objects_max};
    d["files"] = files;
    domains.push_back(d);
  }
  manifest["domains"] = domains;
  const std::string mpath = (fs::path(root) / "manifest.json").string();
  std::ofstream mf(mpath);
  mf << manifest.dump(2) << "\n";
  return mpath;
}

LoadedDataset load_dataset(const std::string& root) {
  const fs::path mpath = fs::path(root) / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw IoError("missing manifest: " + mpath.string());
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("unreadable manifest: ") + e.what());
  }
  LoadedDataset out;
  out.classes = manifest.at("classes").get<std::vector<std::string>>();
  for (const auto& d : manifest.at("domains")) {
    DomainSpec spec;
    spec.domain_id = d.at("domain_id").get<int>();
    spec.num_images = d.at("num_images").get<int>();
    spec.image_h = d.at("image_size").at(0).get<int>();
    spec.image_w = d.at("image_size").at(1).get<int>();
    spec.appearance = appearance_from_json(d.at("appearance"));
    spec.objects_min = d.at("objects_per_image").at(0).get<int>();
    spec.objects_max = d.at("objects_per_image").at(1).get<int>();
    spec.classes = out.classes;
    out.specs.push_back(spec);

    const fs::path ddir = fs::path(root) / std::to_string(spec.domain_id);
    for (const auto& [fname, sum] : d.at("files").items()) {
      const std::string fpath = (ddir / fname).string();
      if (!fs::exists(fpath)) throw CorruptionError("missing file: " + fpath);
      if (file_checksum(fpath) != sum.get<uint64_t>())
        throw CorruptionError("checksum mismatch: " + fpath);
    }

    std::map<std::string, std::vector<BoxAnnotation>> anns;
    std::ifstream af(ddir / "annotations.jsonl");
    std::string line;
    while (std::getline(af, line)) {
      if (line.empty()) continue;
      json rec = json::parse(line);
      std::vector<BoxAnnotation> boxes;
      for (const auto& b : rec.at("boxes")) {
        BoxAnnotation ba;
        ba.class_id = b.at("class_id").get<int>();
        const auto& bx = b.at("box");
        ba.box = {bx.at(0).get<double>(), bx.at(1).get<double>(), bx.at(2).get<double>(),
                  bx.at(3).get<double>()};
        boxes.push_back(ba);
      }
      anns[rec.at("sample_id").get<std::string>()] = std::move(boxes);
    }

    auto& samples = out.data[spec.domain_id];
    for (const auto& [name, a] : anns) {
      ImageSample s;
      s.sample_id = name;
      s.domain_id = spec.domain_id;
      cv::Mat m = cv::imread((ddir / (name + ".png")).string(), cv::IMREAD_COLOR);
      if (m.empty()) throw CorruptionError("unreadable image: " + name);
      s.pixels = from_mat(m);
      s.boxes = a;
      samples.push_back(std::move(s));
    }
    // deterministic order by the numeric suffix of the sample id
    std::sort(samples.begin(), samples.end(), [](const ImageSample& a, const ImageSample& b) {
      auto key = [](const std::string& id) { return std::stoll(id.substr(id.rfind('_') + 1)); };
      return key(a.sample_id) < key(b.sample_id);
    });
  }
  return out;
}

std::vector<ImageSample> strip_labels(const std::vector<ImageSample>& samples) {
  std::vector<ImageSample> out = samples;
  for (auto& s : out) s.boxes.clear();
  return out;
}

}  // namespace dmsn
