#include "bcnn/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace bcnn {

using nlohmann::json;

// --- spec parsing -------------------------------------------------------------

namespace {

std::vector<Index> extents_field(const json& j, const char* key, size_t rank, Index fallback,
                                 bool required = false) {
  if (!j.contains(key)) {
    if (required) throw ConfigError(strfmt("layer: missing field '%s'", key));
    return std::vector<Index>(rank, fallback);
  }
  const json& v = j.at(key);
  if (v.is_number_integer()) return std::vector<Index>(rank, v.get<Index>());
  if (v.is_array()) {
    auto out = v.get<std::vector<Index>>();
    if (out.size() != rank)
      throw ConfigError(strfmt("layer: '%s' has %zu extents, expected %zu", key, out.size(), rank));
    return out;
  }
  throw ConfigError(strfmt("layer: '%s' must be an integer or array", key));
}

json extents_json(const std::vector<Index>& v) {
  bool uniform = true;
  for (Index x : v) uniform = uniform && x == v[0];
  if (uniform && !v.empty()) return v[0];
  return v;
}

Prior prior_from_json(const json& j) {
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "cauchy") return Prior::cauchy(j.at("gamma").get<real>());
  if (kind == "gaussian") return Prior::gaussian(j.at("sigma").get<real>());
  if (kind == "gaussian_mixture")
    return Prior::gaussian_mixture(j.at("alpha").get<real>(), j.at("sigma0").get<real>(),
                                   j.at("sigma1").get<real>());
  throw ConfigError(strfmt("unknown prior kind '%s'", kind.c_str()));
}

json prior_to_json(const Prior& p) {
  switch (p.kind) {
    case PriorKind::Cauchy: return {{"kind", "cauchy"}, {"gamma", p.cauchy_gamma}};
    case PriorKind::Gaussian: return {{"kind", "gaussian"}, {"sigma", p.gaussian_sigma}};
    case PriorKind::GaussianMixture:
      return {{"kind", "gaussian_mixture"},
              {"alpha", p.mix_alpha},
              {"sigma0", p.mix_sigma0},
              {"sigma1", p.mix_sigma1}};
  }
  return {};
}

}  // namespace

NetworkSpec NetworkSpec::parse_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(strfmt("architecture spec: invalid JSON: %s", e.what()));
  }
  NetworkSpec spec;
  try {
    spec.name = j.value("name", std::string("net"));
    spec.input_shape = j.at("input_shape").get<Shape>();
    spec.num_classes = j.at("num_classes").get<Index>();
    if (j.contains("mode")) {
      std::string m = j.at("mode").get<std::string>();
      if (m == "bayesian")
        spec.mode = NetworkMode::Bayesian;
      else if (m == "deterministic")
        spec.mode = NetworkMode::Deterministic;
      else
        throw ConfigError(strfmt("unknown network mode '%s'", m.c_str()));
    }
    if (j.contains("prior")) spec.prior = prior_from_json(j.at("prior"));
    if (j.contains("sigma0")) spec.sigma0 = j.at("sigma0").get<real>();

    if (spec.input_shape.size() < 3 || spec.input_shape.size() > 4)
      throw ConfigError(strfmt("input_shape must be [channels, spatial(2|3)], got %s",
                               shape_str(spec.input_shape).c_str()));
    const size_t rank = spec.input_shape.size() - 1;

    for (const json& lj : j.at("layers")) {
      LayerSpec l;
      std::string op = lj.at("op").get<std::string>();
      l.activation = act_kind_from_string(lj.value("activation", std::string("none")));
      l.batch_norm = lj.value("batch_norm", false);
      if (op == "conv" || op == "conv_transpose") {
        l.op = op == "conv" ? LayerOp::Conv : LayerOp::ConvTranspose;
        l.conv.out_channels = lj.at("out_channels").get<Index>();
        l.conv.kernel = extents_field(lj, "kernel", rank, 1, true);
        Index default_stride = l.op == LayerOp::ConvTranspose ? l.conv.kernel[0] : 1;
        l.conv.stride = extents_field(lj, "stride", rank, default_stride);
        if (l.op == LayerOp::ConvTranspose) l.conv.stride = l.conv.kernel;
        l.conv.dilation = extents_field(lj, "dilation", rank, 1);
        l.conv.padding = extents_field(lj, "padding", rank, 0);
      } else if (op == "max_pool") {
        l.op = LayerOp::MaxPool;
        l.pool_window = extents_field(lj, "window", rank, 2, true);
      } else if (op == "dense") {
        l.op = LayerOp::Dense;
        l.dense_units = lj.at("units").get<Index>();
      } else if (op == "concat_skip") {
        l.op = LayerOp::ConcatSkip;
        l.skip_source = lj.at("source").get<int>();
      } else {
        throw ConfigError(strfmt("unknown layer op '%s'", op.c_str()));
      }
      spec.layers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw ConfigError(strfmt("architecture spec: %s", e.what()));
  }
  spec.validate();
  return spec;
}

NetworkSpec NetworkSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(strfmt("cannot open architecture spec '%s'", path.c_str()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json_text(ss.str());
}

std::string NetworkSpec::to_json_text() const {
  json j;
  j["name"] = name;
  j["input_shape"] = input_shape;
  j["num_classes"] = num_classes;
  j["mode"] = mode == NetworkMode::Bayesian ? "bayesian" : "deterministic";
  if (mode == NetworkMode::Bayesian) {
    j["prior"] = prior_to_json(prior);
    j["sigma0"] = sigma0;
  }
  json layers = json::array();
  for (const LayerSpec& l : this->layers) {
    json lj;
    switch (l.op) {
      case LayerOp::Conv:
      case LayerOp::ConvTranspose:
        lj["op"] = l.op == LayerOp::Conv ? "conv" : "conv_transpose";
        lj["out_channels"] = l.conv.out_channels;
        lj["kernel"] = extents_json(l.conv.kernel);
        if (l.op == LayerOp::Conv) {
          lj["stride"] = extents_json(l.conv.stride);
          lj["dilation"] = extents_json(l.conv.dilation);
          lj["padding"] = extents_json(l.conv.padding);
        }
        break;
      case LayerOp::MaxPool:
        lj["op"] = "max_pool";
        lj["window"] = extents_json(l.pool_window);
        break;
      case LayerOp::Dense:
        lj["op"] = "dense";
        lj["units"] = l.dense_units;
        break;
      case LayerOp::ConcatSkip:
        lj["op"] = "concat_skip";
        lj["source"] = l.skip_source;
        break;
    }
    if (l.activation != ActKind::None) lj["activation"] = to_string(l.activation);
    if (l.batch_norm) lj["batch_norm"] = true;
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  return j.dump(2);
}

std::vector<Shape> NetworkSpec::chain_shapes() const {
  std::vector<Shape> out;
  Shape cur = input_shape;  // [C, S...]
  for (size_t li = 0; li < layers.size(); ++li) {
    const LayerSpec& l = layers[li];
    auto fail = [&](const std::string& why) {
      throw ConfigError(strfmt("layer %zu (%s): %s", li,
                               l.op == LayerOp::Conv              ? "conv"
                               : l.op == LayerOp::ConvTranspose   ? "conv_transpose"
                               : l.op == LayerOp::MaxPool         ? "max_pool"
                               : l.op == LayerOp::Dense           ? "dense"
                                                                  : "concat_skip",
                               why.c_str()));
    };
    switch (l.op) {
      case LayerOp::Conv: {
        if (cur.size() < 3) fail("needs a spatial input, got " + shape_str(cur));
        std::vector<Index> spatial(cur.begin() + 1, cur.end());
        try {
          l.conv.validate(spatial.size());
          auto os = l.conv.output_extents(spatial);
          cur = Shape{l.conv.out_channels};
          cur.insert(cur.end(), os.begin(), os.end());
        } catch (const std::exception& e) {
          fail(e.what());
        }
        break;
      }
      case LayerOp::ConvTranspose: {
        if (cur.size() < 3) fail("needs a spatial input, got " + shape_str(cur));
        try {
          l.conv.validate(cur.size() - 1);
        } catch (const std::exception& e) {
          fail(e.what());
        }
        for (size_t d = 0; d + 1 < cur.size(); ++d) {
          if (l.conv.kernel[d] != l.conv.stride[d]) fail("kernel must equal stride");
        }
        Shape next{l.conv.out_channels};
        for (size_t d = 1; d < cur.size(); ++d)
          next.push_back(cur[d] * l.conv.kernel[d - 1]);
        cur = next;
        break;
      }
      case LayerOp::MaxPool: {
        if (cur.size() < 3) fail("needs a spatial input, got " + shape_str(cur));
        if (l.pool_window.size() != cur.size() - 1) fail("window rank mismatch");
        Shape next{cur[0]};
        for (size_t d = 1; d < cur.size(); ++d) {
          if (cur[d] % l.pool_window[d - 1] != 0)
            fail(strfmt("extent %lld not divisible by window %lld",
                        static_cast<long long>(cur[d]),
                        static_cast<long long>(l.pool_window[d - 1])));
          next.push_back(cur[d] / l.pool_window[d - 1]);
        }
        cur = next;
        break;
      }
      case LayerOp::Dense: {
        if (l.dense_units < 1) fail("units must be >= 1");
        cur = Shape{l.dense_units};  // implicit flatten
        break;
      }
      case LayerOp::ConcatSkip: {
        if (l.skip_source < 0 || l.skip_source >= static_cast<int>(li))
          fail(strfmt("skip source %d must name an earlier layer", l.skip_source));
        const Shape& src = out[static_cast<size_t>(l.skip_source)];
        if (src.size() != cur.size()) fail("skip source rank mismatch");
        for (size_t d = 1; d < cur.size(); ++d)
          if (src[d] != cur[d])
            fail(strfmt("skip source spatial extents %s do not match %s",
                        shape_str(src).c_str(), shape_str(cur).c_str()));
        cur[0] += src[0];
        break;
      }
    }
    out.push_back(cur);
  }
  return out;
}

void NetworkSpec::validate() const {
  if (num_classes < 2) throw ConfigError("network: num_classes must be >= 2");
  if (layers.empty()) throw ConfigError("network: no layers");
  auto shapes = chain_shapes();
  const Shape& last = shapes.back();
  if (last[0] != num_classes)
    throw ConfigError(strfmt("network: final layer produces %lld channels, expected %lld classes",
                             static_cast<long long>(last[0]),
                             static_cast<long long>(num_classes)));
  ActKind final_act = layers.back().activation;
  if (final_act != ActKind::Softmax && final_act != ActKind::NormalizedSoftplus)
    throw ConfigError("network: final layer must use a normalizing activation");
  if (mode == NetworkMode::Bayesian) {
    prior.validate();
    if (!(sigma0 > 0)) throw ConfigError("network: sigma0 must be > 0");
  }
}

// --- build / forward ------------------------------------------------------------

Network Network::build(const NetworkSpec& spec, RngStream& rng) {
  spec.validate();
  Network net;
  net.spec_ = spec;

  Shape cur = spec.input_shape;
  auto shapes = spec.chain_shapes();
  for (size_t li = 0; li < spec.layers.size(); ++li) {
    const LayerSpec& l = spec.layers[li];
    LayerState state;
    state.spec = l;

    Shape w_shape, b_shape;
    Index fan = 0;  // k^d: kernel taps for conv, fan-in for dense
    if (l.op == LayerOp::Conv) {
      w_shape = Shape{l.conv.out_channels, cur[0]};
      for (Index k : l.conv.kernel) w_shape.push_back(k);
      b_shape = Shape{l.conv.out_channels};
      fan = 1;
      for (Index k : l.conv.kernel) fan *= k;
    } else if (l.op == LayerOp::ConvTranspose) {
      w_shape = Shape{cur[0], l.conv.out_channels};
      for (Index k : l.conv.kernel) w_shape.push_back(k);
      b_shape = Shape{l.conv.out_channels};
      fan = 1;
      for (Index k : l.conv.kernel) fan *= k;
    } else if (l.op == LayerOp::Dense) {
      Index in_features = numel(cur);
      w_shape = Shape{in_features, l.dense_units};
      b_shape = Shape{l.dense_units};
      fan = in_features;
    }

    if (!w_shape.empty()) {
      if (spec.mode == NetworkMode::Bayesian) {
        state.w_vp = init_variational(w_shape, fan, 1, spec.sigma0, rng);
        state.b_vp = init_variational(b_shape, fan, 1, spec.sigma0, rng);
      } else {
        real bound = real(1) / std::sqrt(static_cast<real>(fan));
        state.w = Tensor::uniform(w_shape, -bound, bound, rng, true);
        state.b = Tensor::uniform(b_shape, -bound, bound, rng, true);
      }
    }
    if (l.batch_norm) {
      Index ch = shapes[li][0];
      state.bn_scale = Tensor::full({ch}, 1, true);
      state.bn_shift = Tensor::zeros({ch}, true);
    }
    net.layers_.push_back(std::move(state));
    cur = shapes[li];
  }
  return net;
}

Tensor Network::forward(const Tensor& input, WeightMode wmode, RngStream* rng, bool train_mode,
                        ComplexityTerms* complexity) {
  if (spec_.mode == NetworkMode::Deterministic && wmode == WeightMode::Sample)
    throw ContractError("forward: sample mode on a deterministic network");
  if (wmode == WeightMode::Sample && rng == nullptr)
    throw ContractError("forward: sample mode needs a random stream");

  Shape expect{input.dim(0)};
  expect.insert(expect.end(), spec_.input_shape.begin(), spec_.input_shape.end());
  if (input.shape() != expect)
    throw ShapeError(strfmt("forward: input shape %s, expected %s",
                            shape_str(input.shape()).c_str(), shape_str(expect).c_str()));

  const bool sampling = wmode == WeightMode::Sample && spec_.mode == NetworkMode::Bayesian;
  Tensor cur = input;
  std::vector<Tensor> outputs;
  outputs.reserve(layers_.size());

  for (LayerState& state : layers_) {
    const LayerSpec& l = state.spec;

    Tensor w, b;
    if (l.op == LayerOp::Conv || l.op == LayerOp::ConvTranspose || l.op == LayerOp::Dense) {
      if (spec_.mode == NetworkMode::Bayesian) {
        if (sampling) {
          w = sample_weights(state.w_vp, draw_eps(state.w_vp.mu.shape(), *rng));
          b = sample_weights(state.b_vp, draw_eps(state.b_vp.mu.shape(), *rng));
          if (complexity) {
            Tensor lq = add(log_variational_posterior(w, state.w_vp),
                            log_variational_posterior(b, state.b_vp));
            Tensor lp = add(log_prior(w, spec_.prior), log_prior(b, spec_.prior));
            complexity->log_q = complexity->log_q.defined() ? add(complexity->log_q, lq) : lq;
            complexity->log_prior =
                complexity->log_prior.defined() ? add(complexity->log_prior, lp) : lp;
          }
        } else {
          w = state.w_vp.mu;
          b = state.b_vp.mu;
        }
      } else {
        w = state.w;
        b = state.b;
      }
    }

    switch (l.op) {
      case LayerOp::Conv:
        cur = conv_forward(cur, w, b, l.conv);
        break;
      case LayerOp::ConvTranspose:
        cur = conv_transpose_forward(cur, w, b, l.conv);
        break;
      case LayerOp::MaxPool:
        cur = max_pool_forward(cur, l.pool_window);
        break;
      case LayerOp::Dense:
        if (cur.rank() > 2) cur = reshape(cur, {cur.dim(0), cur.size() / cur.dim(0)});
        cur = dense_forward(cur, w, b);
        break;
      case LayerOp::ConcatSkip:
        cur = concat_channels(cur, outputs[static_cast<size_t>(l.skip_source)]);
        break;
    }
    if (l.batch_norm)
      cur = batch_norm_forward(cur, state.bn_scale, state.bn_shift, state.bn_state,
                               train_mode ? BatchNormMode::Train : BatchNormMode::Eval);
    if (l.activation != ActKind::None) cur = activation(l.activation, cur, 1);
    outputs.push_back(cur);
  }
  return cur;
}

std::vector<Tensor> Network::trainable() {
  std::vector<Tensor> out;
  for (LayerState& state : layers_) {
    if (spec_.mode == NetworkMode::Bayesian) {
      if (state.w_vp.mu.defined()) {
        out.push_back(state.w_vp.mu);
        out.push_back(state.w_vp.rho);
        out.push_back(state.b_vp.mu);
        out.push_back(state.b_vp.rho);
      }
    } else if (state.w.defined()) {
      out.push_back(state.w);
      out.push_back(state.b);
    }
    if (state.bn_scale.defined()) {
      out.push_back(state.bn_scale);
      out.push_back(state.bn_shift);
    }
  }
  return out;
}

Index Network::weight_scalars() const {
  Index n = 0;
  for (const LayerState& state : layers_) {
    if (spec_.mode == NetworkMode::Bayesian) {
      if (state.w_vp.mu.defined()) n += state.w_vp.mu.size() + state.b_vp.mu.size();
    } else if (state.w.defined()) {
      n += state.w.size() + state.b.size();
    }
    if (state.bn_scale.defined()) n += state.bn_scale.size() + state.bn_shift.size();
  }
  return n;
}

// --- checkpoint serialization -----------------------------------------------------

namespace {

void write_block(std::ostream& out, const std::vector<real>& v) {
  std::uint64_t n = v.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(real)));
}

void read_block(std::istream& in, std::vector<real>& v) {
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || n != v.size())
    throw IoError(strfmt("checkpoint: block of %llu values, expected %zu",
                         static_cast<unsigned long long>(n), v.size()));
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(real)));
  if (!in) throw IoError("checkpoint: truncated block");
}

}  // namespace

void Network::save(std::ostream& out) const {
  const char magic[8] = {'B', 'C', 'N', 'N', 'N', 'E', 'T', '1'};
  out.write(magic, sizeof(magic));
  for (const LayerState& state : layers_) {
    if (spec_.mode == NetworkMode::Bayesian && state.w_vp.mu.defined()) {
      write_block(out, {state.w_vp.mu.values().begin(), state.w_vp.mu.values().end()});
      write_block(out, {state.w_vp.rho.values().begin(), state.w_vp.rho.values().end()});
      write_block(out, {state.b_vp.mu.values().begin(), state.b_vp.mu.values().end()});
      write_block(out, {state.b_vp.rho.values().begin(), state.b_vp.rho.values().end()});
    } else if (state.w.defined()) {
      write_block(out, {state.w.values().begin(), state.w.values().end()});
      write_block(out, {state.b.values().begin(), state.b.values().end()});
    }
    if (state.bn_scale.defined()) {
      write_block(out, {state.bn_scale.values().begin(), state.bn_scale.values().end()});
      write_block(out, {state.bn_shift.values().begin(), state.bn_shift.values().end()});
      write_block(out, state.bn_state.running_mean);
      write_block(out, state.bn_state.running_var);
    }
  }
}

void Network::load(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, "BCNNNET1", 8) != 0)
    throw IoError("checkpoint: bad magic");
  auto read_into = [&](Tensor t) {
    std::vector<real> buf(static_cast<size_t>(t.size()));
    read_block(in, buf);
    std::copy(buf.begin(), buf.end(), t.values_mut().begin());
  };
  for (LayerState& state : layers_) {
    if (spec_.mode == NetworkMode::Bayesian && state.w_vp.mu.defined()) {
      read_into(state.w_vp.mu);
      read_into(state.w_vp.rho);
      read_into(state.b_vp.mu);
      read_into(state.b_vp.rho);
    } else if (state.w.defined()) {
      read_into(state.w);
      read_into(state.b);
    }
    if (state.bn_scale.defined()) {
      read_into(state.bn_scale);
      read_into(state.bn_shift);
      if (state.bn_state.running_mean.empty()) {
        state.bn_state.running_mean.resize(static_cast<size_t>(state.bn_scale.size()));
        state.bn_state.running_var.resize(static_cast<size_t>(state.bn_scale.size()));
      }
      read_block(in, state.bn_state.running_mean);
      read_block(in, state.bn_state.running_var);
    }
  }
}

}  // namespace bcnn
