#include "urcdm/scorenet.hpp"

#include <cmath>

#include "urcdm/error.hpp"
#include "urcdm/layers.hpp"
#include "urcdm/rng.hpp"

namespace urcdm::net {

const char* to_string(ConditioningMode m) {
  switch (m) {
    case ConditioningMode::kNone: return "none";
    case ConditioningMode::kLowResImage: return "lowres";
    case ConditioningMode::kLowResImageInpaintMask: return "lowres+mask";
  }
  return "?";
}

ConditioningMode conditioning_mode_from_string(const std::string& s) {
  if (s == "none") return ConditioningMode::kNone;
  if (s == "lowres") return ConditioningMode::kLowResImage;
  if (s == "lowres+mask") return ConditioningMode::kLowResImageInpaintMask;
  fail(ErrorKind::kConfig, "unknown conditioning mode '" + s + "'");
}

std::size_t ScoreNetConfig::input_channels() const {
  std::size_t c = channels * (1 + condition_images);
  if (conditioning == ConditioningMode::kLowResImageInpaintMask) c += 1 + channels;
  return c;
}

void ScoreNetConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::kConfig, "ScoreNetConfig: " + m); };
  if (resolution < 8 || resolution % 8 != 0 || ((resolution / 8) & (resolution / 8 - 1)) != 0) {
    bad("resolution must be a power of two times 8, got " + std::to_string(resolution));
  }
  if (channels == 0) bad("channels must be positive");
  if (levels < 1) bad("levels must be >= 1");
  if ((resolution >> (levels - 1)) < 2 || resolution % (std::size_t{1} << (levels - 1)) != 0) {
    bad("resolution too small for " + std::to_string(levels) + " levels");
  }
  if (base_width == 0 || groups == 0 || base_width % groups != 0) {
    bad("base_width must be a positive multiple of groups");
  }
  if (embed_width == 0) bad("embed_width must be positive");
  if ((conditioning == ConditioningMode::kNone) != (condition_images == 0)) {
    bad("condition_images must be zero exactly when conditioning is none");
  }
}

// ---------------------------------------------------------------------------

struct ResCache {
  nn::GroupNormCache gn1, gn2;
  Tensor pre1, act1, pre2, act2;  // GN outputs and their SiLU activations
};

struct Tape {
  bool recorded = false;
  Tensor input;      // assembled network input
  Tensor embed_in;   // [N,32]
  Tensor embed_pre;  // dense output before SiLU
  Tensor embed;      // [N,E]
  std::vector<ResCache> res;
  std::vector<Tensor> down_in;  // pooled activations, conv inputs
  std::vector<Tensor> up_in;    // concatenated activations, conv inputs
  std::vector<std::size_t> up_split;
  nn::GroupNormCache out_gn;
  Tensor out_pre, out_act;
};

TapeHandle::TapeHandle() : tape_(std::make_unique<Tape>()) {}
TapeHandle::~TapeHandle() = default;
TapeHandle::TapeHandle(TapeHandle&&) noexcept = default;
TapeHandle& TapeHandle::operator=(TapeHandle&&) noexcept = default;
bool TapeHandle::recorded() const { return tape_ && tape_->recorded; }

namespace {

Tensor block_bias(const ParamStore& p, const std::string& prefix, const Tensor& embed) {
  return nn::dense(embed, p.value(prefix + ".emb.w"), p.value(prefix + ".emb.b"));
}

Tensor res_forward(const ParamStore& p, const std::string& pre, const Tensor& h,
                   const Tensor& embed, std::size_t groups, ResCache* cache) {
  ResCache local;
  ResCache& c = cache ? *cache : local;
  c.pre1 = nn::group_norm(h, p.value(pre + ".gn1.g"), p.value(pre + ".gn1.b"), groups, &c.gn1);
  c.act1 = nn::silu(c.pre1);
  Tensor y = nn::conv2d(c.act1, p.value(pre + ".conv1.w"), p.value(pre + ".conv1.b"), 1);
  nn::add_channel_bias(y, block_bias(p, pre, embed));
  c.pre2 = nn::group_norm(y, p.value(pre + ".gn2.g"), p.value(pre + ".gn2.b"), groups, &c.gn2);
  c.act2 = nn::silu(c.pre2);
  Tensor out = nn::conv2d(c.act2, p.value(pre + ".conv2.w"), p.value(pre + ".conv2.b"), 1);
  out += h;
  return out;
}

// Returns dL/dh; adds the block's share of dL/d(embed) into d_embed.
Tensor res_backward(ParamStore& p, const std::string& pre, const ResCache& c, const Tensor& embed,
                    const Tensor& d_out, Tensor& d_embed) {
  auto g2 = nn::conv2d_backward(c.act2, p.value(pre + ".conv2.w"), d_out, 1);
  p.accumulate_grad(pre + ".conv2.w", g2.d_kernel);
  p.accumulate_grad(pre + ".conv2.b", g2.d_bias);
  Tensor d_pre2 = nn::silu_backward(c.pre2, g2.d_input);
  auto n2 = nn::group_norm_backward(c.gn2, p.value(pre + ".gn2.g"), d_pre2);
  p.accumulate_grad(pre + ".gn2.g", n2.d_gamma);
  p.accumulate_grad(pre + ".gn2.b", n2.d_beta);
  const Tensor& dy = n2.d_input;

  auto ge = nn::dense_backward(embed, p.value(pre + ".emb.w"), nn::channel_bias_backward(dy));
  p.accumulate_grad(pre + ".emb.w", ge.d_weight);
  p.accumulate_grad(pre + ".emb.b", ge.d_bias);
  d_embed += ge.d_input;

  auto g1 = nn::conv2d_backward(c.act1, p.value(pre + ".conv1.w"), dy, 1);
  p.accumulate_grad(pre + ".conv1.w", g1.d_kernel);
  p.accumulate_grad(pre + ".conv1.b", g1.d_bias);
  Tensor d_pre1 = nn::silu_backward(c.pre1, g1.d_input);
  auto n1 = nn::group_norm_backward(c.gn1, p.value(pre + ".gn1.g"), d_pre1);
  p.accumulate_grad(pre + ".gn1.g", n1.d_gamma);
  p.accumulate_grad(pre + ".gn1.b", n1.d_beta);

  Tensor dh = d_out;
  dh += n1.d_input;
  return dh;
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

ScoreNet::ScoreNet(ScoreNetConfig config) : config_(config) { config_.validate(); }

ParamStore ScoreNet::init_params(std::uint64_t seed) const {
  const auto& c = config_;
  ParamStore p;
  const std::size_t E = c.embed_width;
  auto conv = [&](const std::string& pre, std::size_t out, std::size_t in) {
    p.add(pre + ".w", Tensor({out, in, 3, 3}));
    p.add(pre + ".b", Tensor({out}));
  };
  auto dense = [&](const std::string& pre, std::size_t out, std::size_t in) {
    p.add(pre + ".w", Tensor({out, in}));
    p.add(pre + ".b", Tensor({out}));
  };
  auto norm = [&](const std::string& pre, std::size_t ch) {
    p.add(pre + ".g", Tensor({ch}, 1.0));
    p.add(pre + ".b", Tensor({ch}));
  };

  dense("temb", E, diffusion::kNoiseEmbeddingDim);
  conv("in", c.width(0), c.input_channels());
  for (std::size_t l = 0; l < c.levels; ++l) {
    const std::string pre = "res" + std::to_string(l);
    const std::size_t w = c.width(l);
    norm(pre + ".gn1", w);
    conv(pre + ".conv1", w, w);
    dense(pre + ".emb", w, E);
    norm(pre + ".gn2", w);
    conv(pre + ".conv2", w, w);
    if (l + 1 < c.levels) {
      const std::string dn = "down" + std::to_string(l);
      conv(dn, c.width(l + 1), w);
      dense(dn + ".emb", c.width(l + 1), E);
      const std::string up = "up" + std::to_string(l);
      conv(up, w, c.width(l + 1) + w);
      dense(up + ".emb", w, E);
    }
  }
  norm("out.gn", c.width(0));
  conv("out", c.channels, c.width(0));

  for (auto& [name, e] : p) {
    const bool is_weight = name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
    if (!is_weight || name == "out.w") continue;
    const auto& s = e.value.shape();
    const std::size_t fan_in = s.size() == 4 ? s[1] * s[2] * s[3] : s[1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    NoiseStream stream(stable_hash(seed, {name_hash(name)}));
    for (auto& v : e.value.values()) v = (2.0 * stream.uniform() - 1.0) * bound;
  }
  return p;
}

Tensor ScoreNet::assemble_input(const Tensor& x_t, const ConditionInput* cond) const {
  const auto& c = config_;
  require_rank(x_t, 4, "ScoreNet input");
  const std::size_t n = x_t.dim(0), r = c.resolution;
  if (x_t.shape() != Shape{n, c.channels, r, r}) {
    fail(ErrorKind::kInvalidShape, "ScoreNet: x_t " + shape_str(x_t.shape()) +
                                       " does not match configured resolution " +
                                       std::to_string(r));
  }
  const bool want_mask = c.conditioning == ConditioningMode::kLowResImageInpaintMask;
  if (c.conditioning == ConditioningMode::kNone) {
    if (cond && (!cond->images.empty() || cond->mask || cond->known)) {
      fail(ErrorKind::kConfig, "ScoreNet: conditioning supplied to an unconditional model");
    }
    return x_t;
  }
  if (!cond || cond->images.size() != c.condition_images) {
    fail(ErrorKind::kConfig, "ScoreNet: expected " + std::to_string(c.condition_images) +
                                 " conditioning images, got " +
                                 std::to_string(cond ? cond->images.size() : 0));
  }
  if (want_mask != (cond->mask.has_value() && cond->known.has_value())) {
    fail(ErrorKind::kConfig, want_mask ? "ScoreNet: inpaint mask and known values required"
                                       : "ScoreNet: inpaint mask supplied to a model without one");
  }
  Tensor in = x_t;
  for (const auto& img : cond->images) {
    if (img.shape() != x_t.shape()) {
      fail(ErrorKind::kInvalidShape,
           "ScoreNet: conditioning image " + shape_str(img.shape()) + " vs " + shape_str(x_t.shape()));
    }
    in = nn::concat_channels(in, to_model_space(img));
  }
  if (want_mask) {
    const Tensor& mask = *cond->mask;
    if (mask.shape() != Shape{n, 1, r, r} || cond->known->shape() != x_t.shape()) {
      fail(ErrorKind::kInvalidShape, "ScoreNet: mask/known shape");
    }
    for (double v : mask.values()) {
      if (v != 0.0 && v != 1.0) fail(ErrorKind::kConfig, "ScoreNet: mask must be binary");
    }
    Tensor known = to_model_space(*cond->known);
    const std::size_t hw = r * r;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t ch = 0; ch < c.channels; ++ch) {
        for (std::size_t q = 0; q < hw; ++q) known[(b * c.channels + ch) * hw + q] *= mask[b * hw + q];
      }
    }
    in = nn::concat_channels(in, mask);
    in = nn::concat_channels(in, known);
  }
  return in;
}

Tensor ScoreNet::run(const ParamStore& p, const Tensor& x_t, const Tensor& embedding,
                     const ConditionInput* cond, Tape* tape) const {
  const auto& c = config_;
  const std::size_t n = x_t.rank() == 4 ? x_t.dim(0) : 0;
  if (embedding.shape() != Shape{n, diffusion::kNoiseEmbeddingDim}) {
    fail(ErrorKind::kInvalidShape, "ScoreNet: embedding shape " + shape_str(embedding.shape()));
  }
  Tensor input = assemble_input(x_t, cond);
  Tensor e_pre = nn::dense(embedding, p.value("temb.w"), p.value("temb.b"));
  Tensor e = nn::silu(e_pre);

  Tensor h = nn::conv2d(input, p.value("in.w"), p.value("in.b"), 1);
  std::vector<Tensor> skips;
  if (tape) {
    tape->res.assign(c.levels, {});
    tape->down_in.assign(c.levels, {});
    tape->up_in.assign(c.levels, {});
    tape->up_split.assign(c.levels, 0);
  }
  for (std::size_t l = 0; l < c.levels; ++l) {
    h = res_forward(p, "res" + std::to_string(l), h, e, c.groups, tape ? &tape->res[l] : nullptr);
    if (l + 1 < c.levels) {
      skips.push_back(h);
      const std::string dn = "down" + std::to_string(l);
      Tensor d = nn::avg_pool2x(h);
      h = nn::conv2d(d, p.value(dn + ".w"), p.value(dn + ".b"), 1);
      nn::add_channel_bias(h, block_bias(p, dn, e));
      if (tape) tape->down_in[l] = std::move(d);
    }
  }
  for (std::size_t l = c.levels - 1; l-- > 0;) {
    const std::string up = "up" + std::to_string(l);
    Tensor u = nn::upsample_nearest2x(h);
    const std::size_t split = u.dim(1);
    Tensor cat = nn::concat_channels(u, skips[l]);
    h = nn::conv2d(cat, p.value(up + ".w"), p.value(up + ".b"), 1);
    nn::add_channel_bias(h, block_bias(p, up, e));
    if (tape) {
      tape->up_in[l] = std::move(cat);
      tape->up_split[l] = split;
    }
  }
  nn::GroupNormCache out_gn;
  Tensor out_pre = nn::group_norm(h, p.value("out.gn.g"), p.value("out.gn.b"), c.groups, &out_gn);
  Tensor out_act = nn::silu(out_pre);
  Tensor out = nn::conv2d(out_act, p.value("out.w"), p.value("out.b"), 1);

  if (tape) {
    tape->input = std::move(input);
    tape->embed_in = embedding;
    tape->embed_pre = std::move(e_pre);
    tape->embed = std::move(e);
    tape->out_gn = std::move(out_gn);
    tape->out_pre = std::move(out_pre);
    tape->out_act = std::move(out_act);
    tape->recorded = true;
  }
  return out;
}

Tensor ScoreNet::predict(const ParamStore& params, const Tensor& x_t, const Tensor& embedding,
                         const ConditionInput* cond) const {
  return run(params, x_t, embedding, cond, nullptr);
}

Tensor ScoreNet::forward(const ParamStore& params, const Tensor& x_t, const Tensor& embedding,
                         const ConditionInput* cond, TapeHandle& tape) const {
  *tape.get() = Tape{};
  return run(params, x_t, embedding, cond, tape.get());
}

void ScoreNet::backward(ParamStore& p, const TapeHandle& handle, const Tensor& d_out) const {
  if (!handle.recorded()) fail(ErrorKind::kState, "ScoreNet::backward called before forward");
  const Tape& t = *handle.get();
  const auto& c = config_;

  auto go = nn::conv2d_backward(t.out_act, p.value("out.w"), d_out, 1);
  p.accumulate_grad("out.w", go.d_kernel);
  p.accumulate_grad("out.b", go.d_bias);
  auto gn = nn::group_norm_backward(t.out_gn, p.value("out.gn.g"),
                                    nn::silu_backward(t.out_pre, go.d_input));
  p.accumulate_grad("out.gn.g", gn.d_gamma);
  p.accumulate_grad("out.gn.b", gn.d_beta);
  Tensor dh = std::move(gn.d_input);

  Tensor d_embed(t.embed.shape());
  std::vector<Tensor> d_skips(c.levels);
  for (std::size_t l = 0; l + 1 < c.levels; ++l) {
    const std::string up = "up" + std::to_string(l);
    auto ge = nn::dense_backward(t.embed, p.value(up + ".emb.w"), nn::channel_bias_backward(dh));
    p.accumulate_grad(up + ".emb.w", ge.d_weight);
    p.accumulate_grad(up + ".emb.b", ge.d_bias);
    d_embed += ge.d_input;
    auto gc = nn::conv2d_backward(t.up_in[l], p.value(up + ".w"), dh, 1);
    p.accumulate_grad(up + ".w", gc.d_kernel);
    p.accumulate_grad(up + ".b", gc.d_bias);
    auto [du, dskip] = nn::split_channels(gc.d_input, t.up_split[l]);
    d_skips[l] = std::move(dskip);
    dh = nn::upsample_nearest2x_backward(du);
  }
  for (std::size_t l = c.levels; l-- > 0;) {
    if (l + 1 < c.levels) {
      const std::string dn = "down" + std::to_string(l);
      auto ge = nn::dense_backward(t.embed, p.value(dn + ".emb.w"), nn::channel_bias_backward(dh));
      p.accumulate_grad(dn + ".emb.w", ge.d_weight);
      p.accumulate_grad(dn + ".emb.b", ge.d_bias);
      d_embed += ge.d_input;
      auto gc = nn::conv2d_backward(t.down_in[l], p.value(dn + ".w"), dh, 1);
      p.accumulate_grad(dn + ".w", gc.d_kernel);
      p.accumulate_grad(dn + ".b", gc.d_bias);
      dh = nn::avg_pool2x_backward(gc.d_input);
      dh += d_skips[l];
    }
    dh = res_backward(p, "res" + std::to_string(l), t.res[l], t.embed, dh, d_embed);
  }
  auto gi = nn::conv2d_backward(t.input, p.value("in.w"), dh, 1, /*want_input_grad=*/false);
  p.accumulate_grad("in.w", gi.d_kernel);
  p.accumulate_grad("in.b", gi.d_bias);

  auto gt = nn::dense_backward(t.embed_in, p.value("temb.w"),
                               nn::silu_backward(t.embed_pre, d_embed));
  p.accumulate_grad("temb.w", gt.d_weight);
  p.accumulate_grad("temb.b", gt.d_bias);
}

Tensor noise_embedding_batch(const diffusion::NoiseSchedule& sched, const std::vector<int>& steps) {
  Tensor e({steps.size(), diffusion::kNoiseEmbeddingDim});
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto v = sched.noise_embedding(steps[i]);
    std::copy(v.begin(), v.end(), e.data() + i * diffusion::kNoiseEmbeddingDim);
  }
  return e;
}

// ---------------------------------------------------------------------------

ScoreModel::ScoreModel(ModelSpec spec, ParamStore params)
    : spec_(spec),
      net_(spec.net),
      params_(std::move(params)),
      schedule_(spec.schedule_steps, spec.schedule_kind) {
  const ParamStore reference = net_.init_params(0);
  if (reference.names() != params_.names()) {
    fail(ErrorKind::kConfig, "ScoreModel: parameter set does not match the network config");
  }
  for (const auto& [name, e] : reference) {
    if (e.value.shape() != params_.value(name).shape()) {
      fail(ErrorKind::kConfig, "ScoreModel: shape mismatch for " + name);
    }
  }
}

ScoreModel ScoreModel::initialize(const ModelSpec& spec, std::uint64_t seed) {
  ScoreNet net(spec.net);
  return ScoreModel(spec, net.init_params(seed));
}

Tensor ScoreModel::predict(const Tensor& x_t, int t, const ConditionInput* cond) const {
  const std::vector<int> steps(x_t.dim(0), t);
  return net_.predict(params_, x_t, noise_embedding_batch(schedule_, steps), cond);
}

namespace {

Tensor scalar(double v) { return Tensor({1}, v); }

std::size_t meta_uint(const TensorMap& m, const std::string& k) {
  auto it = m.find("meta." + k);
  if (it == m.end() || it->second.size() != 1) {
    fail(ErrorKind::kConfig, "checkpoint: missing meta." + k);
  }
  const double v = it->second[0];
  if (v < 0 || v != std::floor(v)) fail(ErrorKind::kConfig, "checkpoint: bad meta." + k);
  return static_cast<std::size_t>(v);
}

}  // namespace

TensorMap ScoreModel::to_checkpoint() const {
  TensorMap m = to_tensor_map(params_);
  const auto& n = spec_.net;
  m["meta.resolution"] = scalar(static_cast<double>(n.resolution));
  m["meta.channels"] = scalar(static_cast<double>(n.channels));
  m["meta.base_width"] = scalar(static_cast<double>(n.base_width));
  m["meta.levels"] = scalar(static_cast<double>(n.levels));
  m["meta.groups"] = scalar(static_cast<double>(n.groups));
  m["meta.embed_width"] = scalar(static_cast<double>(n.embed_width));
  m["meta.conditioning"] = scalar(static_cast<double>(n.conditioning));
  m["meta.condition_images"] = scalar(static_cast<double>(n.condition_images));
  m["meta.target"] = scalar(static_cast<double>(spec_.target));
  m["meta.schedule_steps"] = scalar(static_cast<double>(spec_.schedule_steps));
  m["meta.schedule_kind"] = scalar(static_cast<double>(spec_.schedule_kind));
  return m;
}

ScoreModel ScoreModel::from_checkpoint(const TensorMap& entries) {
  ModelSpec spec;
  spec.net.resolution = meta_uint(entries, "resolution");
  spec.net.channels = meta_uint(entries, "channels");
  spec.net.base_width = meta_uint(entries, "base_width");
  spec.net.levels = meta_uint(entries, "levels");
  spec.net.groups = meta_uint(entries, "groups");
  spec.net.embed_width = meta_uint(entries, "embed_width");
  const auto mode = meta_uint(entries, "conditioning");
  if (mode > 2) fail(ErrorKind::kConfig, "checkpoint: bad conditioning mode");
  spec.net.conditioning = static_cast<ConditioningMode>(mode);
  spec.net.condition_images = meta_uint(entries, "condition_images");
  const auto target = meta_uint(entries, "target");
  if (target > 1) fail(ErrorKind::kConfig, "checkpoint: bad target");
  spec.target = static_cast<diffusion::PredictionTarget>(target);
  spec.schedule_steps = static_cast<int>(meta_uint(entries, "schedule_steps"));
  const auto kind = meta_uint(entries, "schedule_kind");
  if (kind > 1) fail(ErrorKind::kConfig, "checkpoint: bad schedule kind");
  spec.schedule_kind = static_cast<diffusion::ScheduleKind>(kind);

  ParamStore params;
  for (const auto& [name, t] : entries) {
    if (name.rfind("meta.", 0) == 0) continue;
    params.add(name, t);
  }
  return ScoreModel(spec, std::move(params));
}

ScoreModel ScoreModel::load(const std::string& path) { return from_checkpoint(load_checkpoint(path)); }

void ScoreModel::save(const std::string& path) const { save_checkpoint(path, to_checkpoint()); }

}  // namespace urcdm::net
