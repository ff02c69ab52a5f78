#include "defgrasp/imaging.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace defgrasp::imaging {

using geometry::Vec3;

static_assert(std::endian::native == std::endian::little,
              "GMAP files are little-endian; big-endian hosts are not supported");

double normalize_stiffness(double young_modulus, StiffnessScale scale) {
  const double e = std::clamp(young_modulus, kStiffnessMin, kStiffnessMax);
  if (scale == StiffnessScale::Linear)
    return (e - kStiffnessMin) / (kStiffnessMax - kStiffnessMin);
  return std::log10(e / kStiffnessMin) / std::log10(kStiffnessMax / kStiffnessMin);
}

double wrap_angle(double a) {
  double r = std::remainder(a, std::numbers::pi);
  if (r >= std::numbers::pi / 2) r -= std::numbers::pi;
  if (r < -std::numbers::pi / 2) r += std::numbers::pi;
  return r;
}

Views render_views(const geometry::SurfaceMesh& surface,
                   const std::vector<fem::MaterialParams>& materials, const Camera& camera,
                   const std::string& object_name) {
  Views out{Image(camera.height, camera.width, static_cast<float>(camera.camera_height)),
            Image(camera.height, camera.width, 0.0f)};
  if (surface.triangles.empty()) return out;

  const auto b = surface.bounds();
  // the pixel grid spans half a pixel beyond the outermost pixel centres
  const double x_lo = camera.world_x(-0.5), x_hi = camera.world_x(camera.width - 0.5);
  const double y_lo = camera.world_y(-0.5), y_hi = camera.world_y(camera.height - 0.5);
  if (b.min().x() < x_lo || b.max().x() > x_hi || b.min().y() < y_lo || b.max().y() > y_hi)
    throw std::runtime_error("object '" + object_name + "' lies outside the camera footprint");
  if (b.max().z() > camera.camera_height)
    throw std::runtime_error("object '" + object_name + "' pokes above the camera plane");

  const geometry::Bvh bvh(surface);
  for (int r = 0; r < camera.height; ++r) {
    for (int c = 0; c < camera.width; ++c) {
      const Vec3 origin(camera.world_x(c), camera.world_y(r), camera.camera_height);
      const auto hit = bvh.raycast(origin, Vec3(0, 0, -1));
      if (!hit) continue;
      out.depth.at(r, c) = static_cast<float>(hit->distance);
      const int mat = surface.tri_material[hit->triangle];
      out.stiffness.at(r, c) =
          static_cast<float>(normalize_stiffness(materials.at(mat).young_modulus));
    }
  }
  return out;
}

GraspRect project_grasp(const GraspCandidate& grasp, const Camera& camera,
                        const fem::GripperModel& gripper) {
  if (grasp.width <= 0.0) throw std::invalid_argument("cannot project a zero-width grasp");
  GraspRect r;
  r.cx = camera.px_x(grasp.center.x());
  r.cy = camera.px_y(grasp.center.y());
  r.phi = wrap_angle(grasp.yaw());
  r.width_px = std::min(camera.scale * grasp.width, kMaxWidthPx);
  r.height_px = camera.scale * gripper.pad_width;
  return r;
}

GraspMap rasterize_maps(const std::vector<LabeledRect>& rects, int height, int width) {
  GraspMap m{Image(height, width), Image(height, width), Image(height, width),
             Image(height, width), Image(height, width)};
  for (const auto& lr : rects) {
    const GraspRect& rect = lr.rect;
    const double cp = std::cos(rect.phi), sp = std::sin(rect.phi);
    const double hw = rect.width_px / 2.0, hh = rect.height_px / 2.0;
    const float s2p = static_cast<float>(std::sin(2.0 * rect.phi));
    const float c2p = static_cast<float>(std::cos(2.0 * rect.phi));
    const float wn = static_cast<float>(std::min(rect.width_px, kMaxWidthPx) / kMaxWidthPx);
    const float q = static_cast<float>(lr.quality);

    // bounding box of the oriented rectangle, clipped to the image
    const double rx = std::abs(cp) * hw + std::abs(sp) * hh;
    const double ry = std::abs(sp) * hw + std::abs(cp) * hh;
    const int c0 = std::max(0, static_cast<int>(std::ceil(rect.cx - rx - 1e-9)));
    const int c1 = std::min(width - 1, static_cast<int>(std::floor(rect.cx + rx + 1e-9)));
    const int r0 = std::max(0, static_cast<int>(std::ceil(rect.cy - ry - 1e-9)));
    const int r1 = std::min(height - 1, static_cast<int>(std::floor(rect.cy + ry + 1e-9)));
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        const double dx = c - rect.cx, dy = r - rect.cy;
        const double u = dx * cp + dy * sp;
        const double v = -dx * sp + dy * cp;
        if (std::abs(u) > hw + 1e-9 || std::abs(v) > hh + 1e-9) continue;
        if (m.mask.at(r, c) != 0.0f && q <= m.q.at(r, c)) continue;
        m.q.at(r, c) = q;
        m.sin2p.at(r, c) = s2p;
        m.cos2p.at(r, c) = c2p;
        m.wnorm.at(r, c) = wn;
        m.mask.at(r, c) = 1.0f;
      }
    }
  }
  return m;
}

namespace {

float bilinear(const Image& im, double sx, double sy, float background) {
  if (sx < 0.0 || sy < 0.0 || sx > im.width - 1 || sy > im.height - 1) return background;
  const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
  const int x1 = std::min(x0 + 1, im.width - 1), y1 = std::min(y0 + 1, im.height - 1);
  const double fx = sx - x0, fy = sy - y0;
  return static_cast<float>((1 - fx) * (1 - fy) * im.at(y0, x0) + fx * (1 - fy) * im.at(y0, x1) +
                            (1 - fx) * fy * im.at(y1, x0) + fx * fy * im.at(y1, x1));
}

bool any_valid(const Image& mask) {
  return std::any_of(mask.v.begin(), mask.v.end(), [](float m) { return m != 0.0f; });
}

// Gaussian blur with kernel weights renormalized at the borders.
Image smooth(const Image& in, double sigma) {
  if (sigma <= 0.0) return in;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> w(2 * radius + 1);
  for (int k = -radius; k <= radius; ++k) w[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));

  Image tmp(in.height, in.width), out(in.height, in.width);
  for (int r = 0; r < in.height; ++r) {
    for (int c = 0; c < in.width; ++c) {
      double acc = 0.0, norm = 0.0;
      for (int k = std::max(-radius, -c); k <= std::min(radius, in.width - 1 - c); ++k) {
        acc += w[k + radius] * in.at(r, c + k);
        norm += w[k + radius];
      }
      tmp.at(r, c) = static_cast<float>(acc / norm);
    }
  }
  for (int r = 0; r < in.height; ++r) {
    for (int c = 0; c < in.width; ++c) {
      double acc = 0.0, norm = 0.0;
      for (int k = std::max(-radius, -r); k <= std::min(radius, in.height - 1 - r); ++k) {
        acc += w[k + radius] * tmp.at(r + k, c);
        norm += w[k + radius];
      }
      out.at(r, c) = static_cast<float>(acc / norm);
    }
  }
  return out;
}

}  // namespace

Sample transform_sample(const Sample& in, const Camera& camera, double theta, double zoom) {
  if (zoom <= 0.0) throw std::invalid_argument("zoom must be positive");
  const int H = in.depth.height, W = in.depth.width;
  Sample out{Image(H, W, static_cast<float>(camera.camera_height)), Image(H, W),
             GraspMap{Image(H, W), Image(H, W), Image(H, W), Image(H, W), Image(H, W)}};
  const double ctrc = (W - 1) / 2.0, ctrr = (H - 1) / 2.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  const float c2t = static_cast<float>(std::cos(2.0 * theta));
  const float s2t = static_cast<float>(std::sin(2.0 * theta));

  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      // inverse transform: where this output pixel came from
      const double dx = (c - ctrc) / zoom, dy = (r - ctrr) / zoom;
      const double sx = ct * dx + st * dy + ctrc;
      const double sy = -st * dx + ct * dy + ctrr;

      out.depth.at(r, c) = bilinear(in.depth, sx, sy, static_cast<float>(camera.camera_height));
      out.stiffness.at(r, c) = bilinear(in.stiffness, sx, sy, 0.0f);

      const long rn = std::lround(sy), cn = std::lround(sx);
      if (rn < 0 || cn < 0 || rn >= H || cn >= W) continue;  // labels stay background
      const int ri = static_cast<int>(rn), ci = static_cast<int>(cn);
      out.map.q.at(r, c) = in.map.q.at(ri, ci);
      out.map.mask.at(r, c) = in.map.mask.at(ri, ci);
      out.map.wnorm.at(r, c) = std::min(in.map.wnorm.at(ri, ci) * static_cast<float>(zoom), 1.0f);
      const float s = in.map.sin2p.at(ri, ci), co = in.map.cos2p.at(ri, ci);
      out.map.sin2p.at(r, c) = s * c2t + co * s2t;
      out.map.cos2p.at(r, c) = co * c2t - s * s2t;
    }
  }
  return out;
}

Sample augment(const Sample& in, const Camera& camera, Rng& rng) {
  const bool had_valid = any_valid(in.map.mask);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double theta = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double zoom = rng.uniform(0.8, 1.1);
    Sample out = transform_sample(in, camera, theta, zoom);
    if (!had_valid || any_valid(out.map.mask)) return out;
  }
  return in;  // every draw pushed the labels out of frame
}

std::vector<DecodedGrasp> decode_grasps(const GraspMap& prediction, const Image& depth,
                                        const Camera& camera, int top_k,
                                        const DecodeOptions& options) {
  const int H = prediction.q.height, W = prediction.q.width;
  const Image qs = smooth(prediction.q, options.smooth_sigma);
  const double rad = std::max(options.min_peak_distance, 1.0);
  const int ri = static_cast<int>(std::ceil(rad));

  // local maxima: no strictly greater value within the peak radius
  std::vector<char> is_peak(size_t(H) * W, 0);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const float v = qs.at(r, c);
      if (v <= 0.0f) continue;
      bool ok = true;
      for (int dr = -ri; dr <= ri && ok; ++dr) {
        const int rr = r + dr;
        if (rr < 0 || rr >= H) continue;
        for (int dc = -ri; dc <= ri; ++dc) {
          const int cc = c + dc;
          if (cc < 0 || cc >= W || dr * dr + dc * dc > rad * rad) continue;
          if (qs.at(rr, cc) > v) {
            ok = false;
            break;
          }
        }
      }
      if (ok) is_peak[size_t(r) * W + c] = 1;
    }
  }

  // adjacent peak pixels (a flat summit) collapse into one component
  struct PeakComp {
    float value = 0.0f;
    int seed = 0;
    std::vector<int> pixels;
  };
  std::vector<PeakComp> comps;
  std::vector<char> seen(size_t(H) * W, 0);
  for (int i = 0; i < H * W; ++i) {
    if (!is_peak[i] || seen[i]) continue;
    PeakComp comp;
    comp.value = qs.v[i];
    comp.seed = i;
    comp.pixels.push_back(i);
    seen[i] = 1;
    for (size_t head = 0; head < comp.pixels.size(); ++head) {
      const int p = comp.pixels[head];
      const int pr = p / W, pc = p % W;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = pr + dr, cc = pc + dc;
          if (rr < 0 || cc < 0 || rr >= H || cc >= W) continue;
          const int j = rr * W + cc;
          if (is_peak[j] && !seen[j]) {
            seen[j] = 1;
            comp.pixels.push_back(j);
          }
        }
    }
    comps.push_back(std::move(comp));
  }
  std::sort(comps.begin(), comps.end(), [](const PeakComp& a, const PeakComp& b) {
    return a.value != b.value ? a.value > b.value : a.seed < b.seed;
  });

  std::vector<DecodedGrasp> out;
  std::vector<Eigen::Vector2d> accepted;
  std::vector<int> support;
  std::vector<char> in_support(size_t(H) * W, 0);
  for (const PeakComp& comp : comps) {
    if (static_cast<int>(out.size()) >= top_k) break;

    // sub-pixel centre: centroid of the connected region still above half the
    // peak value (the rectangle or blob this summit belongs to)
    const float floor_q = 0.5f * comp.value;
    support = comp.pixels;
    for (int p : support) in_support[p] = 1;
    double sum_r = 0.0, sum_c = 0.0;
    for (size_t head = 0; head < support.size(); ++head) {
      const int p = support[head];
      const int pr = p / W, pc = p % W;
      sum_r += pr;
      sum_c += pc;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = pr + dr, cc = pc + dc;
          if (rr < 0 || cc < 0 || rr >= H || cc >= W) continue;
          const int j = rr * W + cc;
          if (!in_support[j] && qs.v[j] >= floor_q) {
            in_support[j] = 1;
            support.push_back(j);
          }
        }
    }
    const double cy = sum_r / support.size(), cx = sum_c / support.size();
    // ridge wobble can make several summits per blob: they share the support
    // centroid, so centre-distance suppression merges them
    bool dominated = false;
    for (const auto& a : accepted)
      if ((a - Eigen::Vector2d(cx, cy)).norm() < rad) dominated = true;
    int read = comp.seed;
    double read_d = 1e18;
    for (int p : support) {
      const double d = (p / W - cy) * (p / W - cy) + (p % W - cx) * (p % W - cx);
      if (d < read_d) {
        read_d = d;
        read = p;
      }
    }
    for (int p : support) in_support[p] = 0;
    if (dominated) continue;

    const int rr = read / W, rc = read % W;
    DecodedGrasp g;
    g.quality = comp.value;
    g.px = {cx, cy};
    g.grasp.approach = Vec3(0, 0, -1);
    const double phi =
        wrap_angle(0.5 * std::atan2(prediction.sin2p.at(rr, rc), prediction.cos2p.at(rr, rc)));
    g.grasp.axis = Vec3(std::cos(phi), std::sin(phi), 0.0);
    const double wn = std::clamp<double>(prediction.wnorm.at(rr, rc), 0.0, 1.0);
    g.grasp.width = wn * kMaxWidthPx / camera.scale;
    const double surface_z = camera.camera_height - depth.at(rr, rc);
    g.grasp.center = Vec3(camera.world_x(cx), camera.world_y(cy),
                          std::max(surface_z + options.center_offset, options.min_center_z));
    out.push_back(g);
    accepted.emplace_back(cx, cy);
  }
  return out;
}

Tensor pack_sample(const Sample& sample) {
  const int H = sample.depth.height, W = sample.depth.width;
  const Image* ch[kSampleChannels] = {&sample.depth,     &sample.stiffness, &sample.map.q,
                                      &sample.map.sin2p, &sample.map.cos2p, &sample.map.wnorm,
                                      &sample.map.mask};
  Tensor t(H, W, kSampleChannels);
  for (int k = 0; k < kSampleChannels; ++k) {
    if (ch[k]->height != H || ch[k]->width != W)
      throw std::invalid_argument("sample channels disagree on image size");
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) t.at(r, c, k) = ch[k]->at(r, c);
  }
  return t;
}

Sample unpack_sample(const Tensor& tensor) {
  if (tensor.channels != kSampleChannels)
    throw std::invalid_argument("expected a " + std::to_string(kSampleChannels) +
                                "-channel sample tensor, got " +
                                std::to_string(tensor.channels));
  const int H = tensor.height, W = tensor.width;
  Sample s{Image(H, W), Image(H, W), GraspMap{Image(H, W), Image(H, W), Image(H, W),
                                              Image(H, W), Image(H, W)}};
  Image* ch[kSampleChannels] = {&s.depth,     &s.stiffness, &s.map.q,  &s.map.sin2p,
                                &s.map.cos2p, &s.map.wnorm, &s.map.mask};
  for (int k = 0; k < kSampleChannels; ++k)
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) ch[k]->at(r, c) = tensor.at(r, c, k);
  return s;
}

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const uint32_t header[4] = {1u, static_cast<uint32_t>(tensor.height),
                              static_cast<uint32_t>(tensor.width),
                              static_cast<uint32_t>(tensor.channels)};
  f.write("GMAP", 4);
  f.write(reinterpret_cast<const char*>(header), sizeof(header));
  f.write(reinterpret_cast<const char*>(tensor.v.data()),
          static_cast<std::streamsize>(tensor.v.size() * sizeof(float)));
  if (!f) throw std::runtime_error("short write to " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  char magic[4] = {};
  uint32_t header[4] = {};
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!f || std::memcmp(magic, "GMAP", 4) != 0)
    throw std::runtime_error(path.string() + " is not a GMAP tensor file");
  if (header[0] != 1)
    throw std::runtime_error(path.string() + ": unsupported GMAP version " +
                             std::to_string(header[0]));
  Tensor t;
  t.height = static_cast<int>(header[1]);
  t.width = static_cast<int>(header[2]);
  t.channels = static_cast<int>(header[3]);
  const uint64_t count = uint64_t(header[1]) * header[2] * header[3];
  if (count > (1u << 30))
    throw std::runtime_error(path.string() + ": implausible GMAP dimensions");
  t.v.resize(count);
  f.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!f || f.gcount() != static_cast<std::streamsize>(count * sizeof(float)) ||
      f.peek() != std::ifstream::traits_type::eof())
    throw std::runtime_error(path.string() + ": payload size does not match the GMAP header");
  return t;
}

}  // namespace defgrasp::imaging
