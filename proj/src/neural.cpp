#include "defgrasp/neural.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "defgrasp/rng.hpp"

namespace defgrasp::neural {
namespace {

static_assert(std::endian::native == std::endian::little,
              "GNET files are little-endian and so must be the host");

constexpr int kHeads = 4;
constexpr const char* kHeadNames[kHeads] = {"head_q", "head_sin", "head_cos", "head_w"};

// Resolved layer: weights live at [w_off, b_off) laid out kernel-row,
// kernel-col, in-channel with the out-channel index fastest, biases at
// [b_off, b_off + out_ch). `pad` is the leading pad; the trailing pad is
// kernel - stride - pad, which keeps conv output at H/stride and transposed
// output at H*stride.
struct LayerDef {
  bool transposed = false;
  int in_ch = 0, out_ch = 0, kernel = 0, stride = 1, pad = 0;
  size_t w_off = 0, b_off = 0;
  std::string name;
};

size_t weight_count(const LayerDef& d) {
  return size_t(d.kernel) * d.kernel * d.in_ch * d.out_ch;
}

std::vector<LayerDef> make_plan(const Arch& a) {
  if (a.in_channels < 1)
    throw std::invalid_argument("network needs at least one input channel");
  if (a.head_kernel < 1) throw std::invalid_argument("head kernel must be positive");
  std::vector<LayerDef> plan;
  long enc = 1, dec = 1;
  int ch = a.in_channels;
  size_t off = 0;
  int n_conv = 0, n_tconv = 0;
  for (const StageSpec& s : a.stages) {
    if (s.out_channels < 1 || s.kernel < 1 || s.stride < 1)
      throw std::invalid_argument("stage channels, kernel, and stride must be positive");
    if (s.kernel < s.stride)
      throw std::invalid_argument("stage kernel must be at least the stride");
    LayerDef d;
    d.transposed = s.transposed;
    d.in_ch = ch;
    d.out_ch = s.out_channels;
    d.kernel = s.kernel;
    d.stride = s.stride;
    d.pad = (s.kernel - s.stride) / 2;
    if (s.transposed) {
      d.name = "tconv" + std::to_string(++n_tconv);
      dec *= s.stride;
    } else {
      d.name = "conv" + std::to_string(++n_conv);
      enc *= s.stride;
    }
    d.w_off = off;
    d.b_off = off + weight_count(d);
    off = d.b_off + d.out_ch;
    ch = s.out_channels;
    plan.push_back(std::move(d));
  }
  if (enc != dec)
    throw std::invalid_argument("encoder downsamples by " + std::to_string(enc) +
                                " but the decoder upsamples by " + std::to_string(dec));
  for (const char* name : kHeadNames) {
    LayerDef d;
    d.in_ch = ch;
    d.out_ch = 1;
    d.kernel = a.head_kernel;
    d.stride = 1;
    d.pad = (a.head_kernel - 1) / 2;
    d.name = name;
    d.w_off = off;
    d.b_off = off + weight_count(d);
    off = d.b_off + 1;
    plan.push_back(std::move(d));
  }
  return plan;
}

size_t plan_param_count(const std::vector<LayerDef>& plan) {
  return plan.back().b_off + plan.back().out_ch;
}

// Activation buffer templated on the compute scalar; float for training and
// inference, double for the gradient audit.
template <class T>
struct Plane {
  int h = 0, w = 0, c = 0;
  std::vector<T> v;

  void resize(int hh, int ww, int cc) {
    h = hh;
    w = ww;
    c = cc;
    v.assign(size_t(hh) * ww * cc, T(0));
  }
  T* px(int r, int col) { return v.data() + (size_t(r) * w + col) * c; }
  const T* px(int r, int col) const { return v.data() + (size_t(r) * w + col) * c; }
};

template <class T>
Plane<T> plane_from_tensor(const Tensor& t) {
  Plane<T> p;
  p.resize(t.height, t.width, t.channels);
  for (size_t i = 0; i < t.v.size(); ++i) p.v[i] = T(t.v[i]);
  return p;
}

template <class T>
void conv_forward(const Plane<T>& in, const LayerDef& L, const T* w, const T* b,
                  Plane<T>& out) {
  const int k = L.kernel, s = L.stride, pad = L.pad;
  out.resize(in.h / s, in.w / s, L.out_ch);
  for (int ro = 0; ro < out.h; ++ro) {
    for (int co = 0; co < out.w; ++co) {
      T* orow = out.px(ro, co);
      for (int oc = 0; oc < L.out_ch; ++oc) orow[oc] = b[oc];
      for (int kr = 0; kr < k; ++kr) {
        const int ri = ro * s + kr - pad;
        if (ri < 0 || ri >= in.h) continue;
        for (int kc = 0; kc < k; ++kc) {
          const int ci = co * s + kc - pad;
          if (ci < 0 || ci >= in.w) continue;
          const T* irow = in.px(ri, ci);
          const T* wk = w + (size_t(kr) * k + kc) * L.in_ch * L.out_ch;
          for (int ic = 0; ic < L.in_ch; ++ic) {
            const T vin = irow[ic];
            const T* wrow = wk + size_t(ic) * L.out_ch;
            for (int oc = 0; oc < L.out_ch; ++oc) orow[oc] += vin * wrow[oc];
          }
        }
      }
    }
  }
}

template <class T>
void conv_backward(const Plane<T>& in, const LayerDef& L, const T* w,
                   const Plane<T>& dout, Plane<T>& din, T* dw, T* db) {
  const int k = L.kernel, s = L.stride, pad = L.pad;
  din.resize(in.h, in.w, in.c);
  for (int ro = 0; ro < dout.h; ++ro) {
    for (int co = 0; co < dout.w; ++co) {
      const T* grow = dout.px(ro, co);
      for (int oc = 0; oc < L.out_ch; ++oc) db[oc] += grow[oc];
      for (int kr = 0; kr < k; ++kr) {
        const int ri = ro * s + kr - pad;
        if (ri < 0 || ri >= in.h) continue;
        for (int kc = 0; kc < k; ++kc) {
          const int ci = co * s + kc - pad;
          if (ci < 0 || ci >= in.w) continue;
          const T* irow = in.px(ri, ci);
          T* dirow = din.px(ri, ci);
          const size_t base = (size_t(kr) * k + kc) * L.in_ch * L.out_ch;
          const T* wk = w + base;
          T* dwk = dw + base;
          for (int ic = 0; ic < L.in_ch; ++ic) {
            const T vin = irow[ic];
            const T* wrow = wk + size_t(ic) * L.out_ch;
            T* dwrow = dwk + size_t(ic) * L.out_ch;
            T acc = T(0);
            for (int oc = 0; oc < L.out_ch; ++oc) {
              acc += wrow[oc] * grow[oc];
              dwrow[oc] += vin * grow[oc];
            }
            dirow[ic] += acc;
          }
        }
      }
    }
  }
}

template <class T>
void tconv_forward(const Plane<T>& in, const LayerDef& L, const T* w, const T* b,
                   Plane<T>& out) {
  const int k = L.kernel, s = L.stride, pad = L.pad;
  out.resize(in.h * s, in.w * s, L.out_ch);
  for (int ro = 0; ro < out.h; ++ro)
    for (int co = 0; co < out.w; ++co) {
      T* orow = out.px(ro, co);
      for (int oc = 0; oc < L.out_ch; ++oc) orow[oc] = b[oc];
    }
  for (int ri = 0; ri < in.h; ++ri) {
    for (int ci = 0; ci < in.w; ++ci) {
      const T* irow = in.px(ri, ci);
      for (int kr = 0; kr < k; ++kr) {
        const int ro = ri * s + kr - pad;
        if (ro < 0 || ro >= out.h) continue;
        for (int kc = 0; kc < k; ++kc) {
          const int co = ci * s + kc - pad;
          if (co < 0 || co >= out.w) continue;
          T* orow = out.px(ro, co);
          const T* wk = w + (size_t(kr) * k + kc) * L.in_ch * L.out_ch;
          for (int ic = 0; ic < L.in_ch; ++ic) {
            const T vin = irow[ic];
            const T* wrow = wk + size_t(ic) * L.out_ch;
            for (int oc = 0; oc < L.out_ch; ++oc) orow[oc] += vin * wrow[oc];
          }
        }
      }
    }
  }
}

template <class T>
void tconv_backward(const Plane<T>& in, const LayerDef& L, const T* w,
                    const Plane<T>& dout, Plane<T>& din, T* dw, T* db) {
  const int k = L.kernel, s = L.stride, pad = L.pad;
  din.resize(in.h, in.w, in.c);
  for (int ro = 0; ro < dout.h; ++ro)
    for (int co = 0; co < dout.w; ++co) {
      const T* grow = dout.px(ro, co);
      for (int oc = 0; oc < L.out_ch; ++oc) db[oc] += grow[oc];
    }
  for (int ri = 0; ri < in.h; ++ri) {
    for (int ci = 0; ci < in.w; ++ci) {
      const T* irow = in.px(ri, ci);
      T* dirow = din.px(ri, ci);
      for (int kr = 0; kr < k; ++kr) {
        const int ro = ri * s + kr - pad;
        if (ro < 0 || ro >= dout.h) continue;
        for (int kc = 0; kc < k; ++kc) {
          const int co = ci * s + kc - pad;
          if (co < 0 || co >= dout.w) continue;
          const T* grow = dout.px(ro, co);
          const size_t base = (size_t(kr) * k + kc) * L.in_ch * L.out_ch;
          const T* wk = w + base;
          T* dwk = dw + base;
          for (int ic = 0; ic < L.in_ch; ++ic) {
            const T vin = irow[ic];
            const T* wrow = wk + size_t(ic) * L.out_ch;
            T* dwrow = dwk + size_t(ic) * L.out_ch;
            T acc = T(0);
            for (int oc = 0; oc < L.out_ch; ++oc) {
              acc += wrow[oc] * grow[oc];
              dwrow[oc] += vin * grow[oc];
            }
            dirow[ic] += acc;
          }
        }
      }
    }
  }
}

template <class T>
T logistic(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
struct Activations {
  std::vector<Plane<T>> trunk;  // trunk[0] = input, then post-ReLU stage outputs
  Plane<T> pred;                // H x W x 4 squashed head outputs
};

template <class T>
void run_forward(const std::vector<LayerDef>& plan, size_t n_trunk,
                 const std::vector<T>& params, const Plane<T>& input,
                 Activations<T>& acts) {
  acts.trunk.assign(n_trunk + 1, Plane<T>{});
  acts.trunk[0] = input;
  for (size_t i = 0; i < n_trunk; ++i) {
    const LayerDef& L = plan[i];
    const Plane<T>& src = acts.trunk[i];
    if (!L.transposed && (src.h % L.stride != 0 || src.w % L.stride != 0))
      throw std::invalid_argument("activation " + std::to_string(src.h) + "x" +
                                  std::to_string(src.w) +
                                  " is not divisible by the stride of " + L.name);
    Plane<T>& dst = acts.trunk[i + 1];
    if (L.transposed)
      tconv_forward(src, L, params.data() + L.w_off, params.data() + L.b_off, dst);
    else
      conv_forward(src, L, params.data() + L.w_off, params.data() + L.b_off, dst);
    for (T& x : dst.v)
      if (!(x > T(0))) x = T(0);  // ReLU
  }
  const Plane<T>& top = acts.trunk[n_trunk];
  acts.pred.resize(top.h, top.w, kHeads);
  Plane<T> head;
  for (int hi = 0; hi < kHeads; ++hi) {
    const LayerDef& L = plan[n_trunk + hi];
    conv_forward(top, L, params.data() + L.w_off, params.data() + L.b_off, head);
    const bool angle_head = hi == 1 || hi == 2;
    for (int r = 0; r < top.h; ++r)
      for (int c = 0; c < top.w; ++c) {
        const T pre = *head.px(r, c);
        acts.pred.px(r, c)[hi] = angle_head ? std::tanh(pre) : logistic(pre);
      }
  }
}

// Loss over a prediction plane; writes dLoss/dpred when requested. Quality is
// averaged over every pixel, the angle/width terms over valid pixels only.
template <class T>
LossParts loss_and_dpred(const Plane<T>& pred, const GraspMap& tgt,
                         const LossWeights& wts, Plane<T>* dpred) {
  const int H = pred.h, W = pred.w;
  const double n_all = double(H) * W;
  size_t n_valid = 0;
  for (float m : tgt.mask.v)
    if (m != 0.0f) ++n_valid;
  if (dpred) dpred->resize(H, W, kHeads);
  double sq = 0, sa = 0, sw = 0;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const T* p = pred.px(r, c);
      const double dq = double(p[0]) - tgt.q.at(r, c);
      sq += dq * dq;
      const bool valid = tgt.mask.at(r, c) != 0.0f;
      double ds = 0, dc = 0, dw = 0;
      if (valid) {
        ds = double(p[1]) - tgt.sin2p.at(r, c);
        dc = double(p[2]) - tgt.cos2p.at(r, c);
        dw = double(p[3]) - tgt.wnorm.at(r, c);
        sa += ds * ds + dc * dc;
        sw += dw * dw;
      }
      if (dpred) {
        T* g = dpred->px(r, c);
        g[0] = T(wts.w_q * 2.0 * dq / n_all);
        if (valid) {
          g[1] = T(wts.w_angle * 2.0 * ds / double(n_valid));
          g[2] = T(wts.w_angle * 2.0 * dc / double(n_valid));
          g[3] = T(wts.w_w * 2.0 * dw / double(n_valid));
        } else {
          g[1] = g[2] = g[3] = T(0);
        }
      }
    }
  }
  LossParts parts;
  parts.q = wts.w_q * sq / n_all;
  if (n_valid > 0) {
    parts.angle = wts.w_angle * sa / double(n_valid);
    parts.w = wts.w_w * sw / double(n_valid);
  }
  return parts;
}

template <class T>
LossParts run_backward(const std::vector<LayerDef>& plan, size_t n_trunk,
                       const std::vector<T>& params, const Activations<T>& acts,
                       const GraspMap& tgt, const LossWeights& wts,
                       std::vector<T>& grad) {
  Plane<T> dpred;
  const LossParts parts = loss_and_dpred(acts.pred, tgt, wts, &dpred);
  const Plane<T>& top = acts.trunk[n_trunk];
  Plane<T> dtop;
  dtop.resize(top.h, top.w, top.c);
  Plane<T> dhead, dtmp;
  for (int hi = 0; hi < kHeads; ++hi) {
    const LayerDef& L = plan[n_trunk + hi];
    const bool angle_head = hi == 1 || hi == 2;
    dhead.resize(top.h, top.w, 1);
    for (int r = 0; r < top.h; ++r)
      for (int c = 0; c < top.w; ++c) {
        const T y = acts.pred.px(r, c)[hi];
        const T slope = angle_head ? T(1) - y * y : y * (T(1) - y);
        *dhead.px(r, c) = dpred.px(r, c)[hi] * slope;
      }
    conv_backward(top, L, params.data() + L.w_off, dhead, dtmp,
                  grad.data() + L.w_off, grad.data() + L.b_off);
    for (size_t i = 0; i < dtop.v.size(); ++i) dtop.v[i] += dtmp.v[i];
  }
  Plane<T> dcur = std::move(dtop);
  for (size_t i = n_trunk; i-- > 0;) {
    const LayerDef& L = plan[i];
    const Plane<T>& out_act = acts.trunk[i + 1];
    for (size_t j = 0; j < dcur.v.size(); ++j)
      if (!(out_act.v[j] > T(0))) dcur.v[j] = T(0);  // ReLU gate
    Plane<T> dprev;
    if (L.transposed)
      tconv_backward(acts.trunk[i], L, params.data() + L.w_off, dcur, dprev,
                     grad.data() + L.w_off, grad.data() + L.b_off);
    else
      conv_backward(acts.trunk[i], L, params.data() + L.w_off, dcur, dprev,
                    grad.data() + L.w_off, grad.data() + L.b_off);
    dcur = std::move(dprev);
  }
  return parts;
}

void check_io_shapes(const NetworkParams& net, const Tensor& input) {
  if (input.height < 1 || input.width < 1)
    throw std::invalid_argument("network input is empty");
  if (input.channels != net.arch.in_channels)
    throw std::invalid_argument("network expects " +
                                std::to_string(net.arch.in_channels) +
                                "-channel input, got " + std::to_string(input.channels));
  if (net.values.size() != param_count(net.arch))
    throw std::invalid_argument("parameter store does not match the architecture");
}

void check_target_shape(const Tensor& input, const GraspMap& tgt) {
  if (tgt.q.height != input.height || tgt.q.width != input.width)
    throw std::invalid_argument("target grasp map does not match the input size");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

int parse_int(const std::string& field, const std::string& token) {
  try {
    size_t used = 0;
    const int v = std::stoi(field, &used);
    if (used != field.size()) throw std::invalid_argument(field);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("bad number in architecture token '" + token + "'");
  }
}

}  // namespace

Arch Arch::standard(int in_channels) {
  Arch a;
  a.in_channels = in_channels;
  a.stages = {
      {false, 8, 9, 2}, {false, 16, 5, 2}, {false, 16, 3, 2},
      {true, 16, 3, 2}, {true, 8, 5, 2},   {true, 8, 9, 2},
  };
  a.head_kernel = 2;
  return a;
}

std::string Arch::to_string() const {
  std::ostringstream out;
  out << "in:" << in_channels;
  for (const StageSpec& s : stages)
    out << ' ' << (s.transposed ? "tconv" : "conv") << ':' << s.out_channels << ':'
        << s.kernel << ':' << s.stride;
  out << " head:" << head_kernel;
  return out.str();
}

Arch Arch::parse(const std::string& text) {
  Arch a;
  bool saw_in = false, saw_head = false;
  std::istringstream in(text);
  std::string token;
  while (in >> token) {
    const auto f = split(token, ':');
    if (f[0] == "in" && f.size() == 2) {
      a.in_channels = parse_int(f[1], token);
      saw_in = true;
    } else if ((f[0] == "conv" || f[0] == "tconv") && f.size() == 4) {
      a.stages.push_back({f[0] == "tconv", parse_int(f[1], token),
                          parse_int(f[2], token), parse_int(f[3], token)});
    } else if (f[0] == "head" && f.size() == 2) {
      a.head_kernel = parse_int(f[1], token);
      saw_head = true;
    } else {
      throw std::invalid_argument("unrecognized architecture token '" + token + "'");
    }
  }
  if (!saw_in || !saw_head)
    throw std::invalid_argument("architecture descriptor must set in: and head:");
  (void)make_plan(a);  // surfaces stride/shape problems at parse time
  return a;
}

size_t param_count(const Arch& arch) { return plan_param_count(make_plan(arch)); }

NetworkParams init_network(const Arch& arch, uint64_t seed) {
  const auto plan = make_plan(arch);
  NetworkParams net;
  net.arch = arch;
  net.values.assign(plan_param_count(plan), 0.0f);
  Rng rng(hash_stream(seed, "net-init", 0));
  for (const LayerDef& L : plan) {
    const double limit = std::sqrt(6.0 / (double(L.kernel) * L.kernel * L.in_ch));
    for (size_t i = 0; i < weight_count(L); ++i)
      net.values[L.w_off + i] = float(rng.uniform(-limit, limit));
  }
  return net;
}

Tensor make_input(const Image& depth, const Image& stiffness, int in_channels) {
  if (in_channels != 1 && in_channels != 2)
    throw std::invalid_argument("input mode must be 1 (depth) or 2 (depth+stiffness)");
  if (depth.height < 1 || depth.width < 1)
    throw std::invalid_argument("depth image is empty");
  if (in_channels == 2 &&
      (stiffness.height != depth.height || stiffness.width != depth.width))
    throw std::invalid_argument("depth and stiffness images differ in size");
  double mean = 0.0;
  for (float d : depth.v) mean += d;
  mean /= double(depth.v.size());
  Tensor t(depth.height, depth.width, in_channels);
  for (int r = 0; r < t.height; ++r)
    for (int c = 0; c < t.width; ++c) {
      t.at(r, c, 0) = float(depth.at(r, c) - mean);
      if (in_channels == 2) t.at(r, c, 1) = stiffness.at(r, c);
    }
  return t;
}

Tensor make_input(const imaging::Sample& sample, int in_channels) {
  return make_input(sample.depth, sample.stiffness, in_channels);
}

Tensor forward(const NetworkParams& net, const Tensor& input) {
  check_io_shapes(net, input);
  const auto plan = make_plan(net.arch);
  Activations<float> acts;
  run_forward(plan, net.arch.stages.size(), net.values,
              plane_from_tensor<float>(input), acts);
  Tensor out(acts.pred.h, acts.pred.w, kHeads);
  out.v = std::move(acts.pred.v);
  return out;
}

GraspMap to_grasp_map(const Tensor& pred) {
  if (pred.channels != kHeads)
    throw std::invalid_argument("prediction must have 4 channels");
  GraspMap m;
  m.q = Image(pred.height, pred.width);
  m.sin2p = Image(pred.height, pred.width);
  m.cos2p = Image(pred.height, pred.width);
  m.wnorm = Image(pred.height, pred.width);
  m.mask = Image(pred.height, pred.width, 1.0f);
  for (int r = 0; r < pred.height; ++r)
    for (int c = 0; c < pred.width; ++c) {
      m.q.at(r, c) = pred.at(r, c, 0);
      m.sin2p.at(r, c) = pred.at(r, c, 1);
      m.cos2p.at(r, c) = pred.at(r, c, 2);
      m.wnorm.at(r, c) = pred.at(r, c, 3);
    }
  return m;
}

LossParts masked_loss(const Tensor& pred, const GraspMap& target,
                      const LossWeights& weights) {
  if (pred.channels != kHeads)
    throw std::invalid_argument("prediction must have 4 channels");
  if (target.q.height != pred.height || target.q.width != pred.width)
    throw std::invalid_argument("prediction and target sizes differ");
  const Plane<double> p = plane_from_tensor<double>(pred);
  return loss_and_dpred<double>(p, target, weights, nullptr);
}

LossParts masked_loss_and_grad(const NetworkParams& net, const Tensor& input,
                               const GraspMap& target, const LossWeights& weights,
                               std::vector<float>& grad) {
  check_io_shapes(net, input);
  check_target_shape(input, target);
  if (grad.empty()) grad.assign(net.values.size(), 0.0f);
  if (grad.size() != net.values.size())
    throw std::invalid_argument("gradient buffer does not match the parameter count");
  const auto plan = make_plan(net.arch);
  Activations<float> acts;
  run_forward(plan, net.arch.stages.size(), net.values,
              plane_from_tensor<float>(input), acts);
  return run_backward(plan, net.arch.stages.size(), net.values, acts, target,
                      weights, grad);
}

TrainResult train(const std::vector<Tensor>& dataset, const TrainConfig& cfg) {
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw std::invalid_argument("epochs and batch size must be positive");
  if (cfg.learning_rate < 0)
    throw std::invalid_argument("learning rate must be non-negative");
  std::vector<Tensor> inputs;
  std::vector<GraspMap> targets;
  inputs.reserve(dataset.size());
  targets.reserve(dataset.size());
  for (const Tensor& t : dataset) {
    imaging::Sample s = imaging::unpack_sample(t);
    inputs.push_back(make_input(s, cfg.input_channels));
    targets.push_back(std::move(s.map));
  }
  NetworkParams net = init_network(Arch::standard(cfg.input_channels), cfg.seed);
  const size_t np = net.values.size();
  std::vector<double> m(np, 0.0), v(np, 0.0), batch_grad(np, 0.0);
  std::vector<float> sample_grad(np, 0.0f);
  std::vector<size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng shuffle_rng(hash_stream(cfg.seed, "train-shuffle", 0));
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  TrainResult result;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);
    double eq = 0, ea = 0, ew = 0;
    size_t batch_idx = 0;
    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size), ++batch_idx) {
      const size_t stop = std::min(order.size(), start + size_t(cfg.batch_size));
      std::fill(batch_grad.begin(), batch_grad.end(), 0.0);
      for (size_t j = start; j < stop; ++j) {
        std::fill(sample_grad.begin(), sample_grad.end(), 0.0f);
        const LossParts parts = masked_loss_and_grad(net, inputs[order[j]],
                                                     targets[order[j]], cfg.weights,
                                                     sample_grad);
        if (!std::isfinite(parts.total()))
          throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_idx));
        eq += parts.q;
        ea += parts.angle;
        ew += parts.w;
        for (size_t p = 0; p < np; ++p) batch_grad[p] += sample_grad[p];
      }
      const double inv = 1.0 / double(stop - start);
      ++step;
      const double c1 = 1.0 - std::pow(b1, double(step));
      const double c2 = 1.0 - std::pow(b2, double(step));
      for (size_t p = 0; p < np; ++p) {
        const double g = batch_grad[p] * inv;
        m[p] = b1 * m[p] + (1.0 - b1) * g;
        v[p] = b2 * v[p] + (1.0 - b2) * g * g;
        net.values[p] -= float(cfg.learning_rate * (m[p] / c1) / (std::sqrt(v[p] / c2) + eps));
      }
    }
    EpochStats st;
    st.epoch = epoch;
    st.loss_q = eq / double(dataset.size());
    st.loss_angle = ea / double(dataset.size());
    st.loss_w = ew / double(dataset.size());
    st.loss_total = st.loss_q + st.loss_angle + st.loss_w;
    result.history.push_back(st);
  }
  result.net = std::move(net);
  return result;
}

void write_history_csv(std::ostream& out, const std::vector<EpochStats>& history) {
  out << "epoch,loss_q,loss_angle,loss_w,loss_total\n";
  const auto saved = out.precision(12);
  for (const EpochStats& e : history)
    out << e.epoch << ',' << e.loss_q << ',' << e.loss_angle << ',' << e.loss_w << ','
        << e.loss_total << '\n';
  out.precision(saved);
}

GradCheckReport grad_check(const NetworkParams& net, const Tensor& input,
                           const GraspMap& target, const LossWeights& weights,
                           uint64_t seed, int probes) {
  check_io_shapes(net, input);
  check_target_shape(input, target);
  const auto plan = make_plan(net.arch);
  const size_t n_trunk = net.arch.stages.size();
  std::vector<double> params(net.values.begin(), net.values.end());
  const Plane<double> in_d = plane_from_tensor<double>(input);
  std::vector<double> grad(params.size(), 0.0);
  {
    Activations<double> acts;
    run_forward(plan, n_trunk, params, in_d, acts);
    run_backward(plan, n_trunk, params, acts, target, weights, grad);
  }
  // The loss is only piecewise smooth: when a +-h step flips some ReLU's
  // activation sign the central difference no longer estimates the analytic
  // derivative, so such probes are redrawn. The sign pattern is hashed from
  // the trunk activations of each evaluation.
  auto loss_at = [&](const std::vector<double>& p, uint64_t& mask_hash) {
    Activations<double> acts;
    run_forward(plan, n_trunk, p, in_d, acts);
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 1; i < acts.trunk.size(); ++i)
      for (double x : acts.trunk[i].v) {
        h ^= x > 0.0 ? 1u : 0u;
        h *= 1099511628211ull;
      }
    mask_hash = h;
    return loss_and_dpred<double>(acts.pred, target, weights, nullptr).total();
  };
  GradCheckReport rep;
  rep.per_layer.reserve(plan.size());
  for (const LayerDef& L : plan) rep.per_layer.push_back({L.name, 0.0});
  Rng rng(hash_stream(seed, "grad-check", 0));
  const double h = 1e-3;
  std::vector<double> p = params;
  const int wanted = std::max(probes, 0);
  int checked = 0;
  for (int attempt = 0; checked < wanted && attempt < wanted * 20; ++attempt) {
    const size_t idx = rng.uniform_index(params.size());
    uint64_t mask_plus = 0, mask_minus = 0;
    p[idx] = params[idx] + h;
    const double lp = loss_at(p, mask_plus);
    p[idx] = params[idx] - h;
    const double lm = loss_at(p, mask_minus);
    p[idx] = params[idx];
    if (mask_plus != mask_minus) continue;  // kink inside the interval
    ++checked;
    const double fd = (lp - lm) / (2.0 * h);
    const double a = grad[idx];
    const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4});
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    for (size_t li = 0; li < plan.size(); ++li) {
      if (idx >= plan[li].w_off && idx < plan[li].b_off + size_t(plan[li].out_ch)) {
        rep.per_layer[li].rel_error = std::max(rep.per_layer[li].rel_error, rel);
        break;
      }
    }
  }
  return rep;
}

void save_network(const std::filesystem::path& path, const NetworkParams& net) {
  if (net.values.size() != param_count(net.arch))
    throw std::invalid_argument("parameter store does not match the architecture");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write("GNET", 4);
  const std::string desc = net.arch.to_string();
  const uint32_t header[2] = {1u, uint32_t(desc.size())};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  out.write(desc.data(), std::streamsize(desc.size()));
  out.write(reinterpret_cast<const char*>(net.values.data()),
            std::streamsize(net.values.size() * sizeof(float)));
  if (!out) throw std::runtime_error("short write to '" + path.string() + "'");
}

NetworkParams load_network(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "GNET", 4) != 0)
    throw std::runtime_error("'" + path.string() + "' is not a GNET checkpoint file");
  uint32_t header[2] = {};
  in.read(reinterpret_cast<char*>(header), sizeof header);
  if (!in) throw std::runtime_error("'" + path.string() + "' is truncated");
  if (header[0] != 1)
    throw std::runtime_error("unsupported GNET version " + std::to_string(header[0]));
  if (header[1] > (1u << 16))
    throw std::runtime_error("implausible GNET descriptor length");
  std::string desc(header[1], '\0');
  in.read(desc.data(), std::streamsize(desc.size()));
  if (!in) throw std::runtime_error("'" + path.string() + "' is truncated");
  NetworkParams net;
  net.arch = Arch::parse(desc);
  net.values.assign(param_count(net.arch), 0.0f);
  in.read(reinterpret_cast<char*>(net.values.data()),
          std::streamsize(net.values.size() * sizeof(float)));
  if (in.gcount() != std::streamsize(net.values.size() * sizeof(float)) ||
      in.peek() != std::char_traits<char>::eof())
    throw std::runtime_error("checkpoint payload does not match its architecture descriptor");
  for (float x : net.values)
    if (!std::isfinite(x))
      throw std::runtime_error("checkpoint contains non-finite parameters");
  return net;
}

}  // namespace defgrasp::neural
