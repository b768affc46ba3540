#include <bit>
#include <fstream>
#include <sstream>

#include "clipo/error.hpp"
#include "clipo/trainer.hpp"
#include "json.hpp"

namespace clipo {

namespace {

constexpr const char* kFormat = "clipo-checkpoint";
constexpr int kVersion = 1;

using ordered = nlohmann::ordered_json;

void put_doubles(std::string& out, std::span<const double> values) {
  for (double v : values) {
    auto u = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xffU));
  }
}

ordered opt_header(const AdamW& opt) {
  ordered j;
  const AdamWConfig& c = opt.config();
  j["steps"] = opt.steps();
  j["learning_rate"] = c.learning_rate;
  j["weight_decay"] = c.weight_decay;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["epsilon"] = c.epsilon;
  j["moments"] = opt.first_moments().size();
  return j;
}

ordered dims_header(const PolicyDims& d) {
  ordered j;
  j["vocab"] = d.vocab;
  j["d_model"] = d.d_model;
  j["max_len"] = d.max_len;
  j["layers"] = d.layers;
  j["heads"] = d.heads;
  j["ff_mult"] = d.ff_mult;
  return j;
}

template <typename T>
T field(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.is_object() || !j.contains(key))
    throw CheckpointError("corrupt checkpoint: missing header field '" + where + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError("corrupt checkpoint: bad header field '" + where + key + "'");
  }
}

AdamW read_opt(const nlohmann::json& j, const std::string& where) {
  AdamWConfig c;
  c.learning_rate = field<double>(j, "learning_rate", where);
  c.weight_decay = field<double>(j, "weight_decay", where);
  c.beta1 = field<double>(j, "beta1", where);
  c.beta2 = field<double>(j, "beta2", where);
  c.epsilon = field<double>(j, "epsilon", where);
  return AdamW(c);
}

// Declared array order; moment tensors are appended by the caller.
std::vector<std::pair<std::string, const Tensor*>> param_arrays(const RunState& s) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [n, t] : s.policy.named()) out.emplace_back("policy." + n, t);
  if (s.reference)
    for (auto& [n, t] : s.reference->named()) out.emplace_back("reference." + n, t);
  if (s.head) out.emplace_back("head.W", &s.head->W);
  const auto names = s.policy.named();
  for (std::size_t i = 0; i < s.policy_opt.first_moments().size(); ++i) {
    out.emplace_back("policy_opt.m." + names[i].first, &s.policy_opt.first_moments()[i]);
    out.emplace_back("policy_opt.v." + names[i].first, &s.policy_opt.second_moments()[i]);
  }
  if (s.head) {
    for (std::size_t i = 0; i < s.head->optimizer.first_moments().size(); ++i) {
      out.emplace_back("head_opt.m.W", &s.head->optimizer.first_moments()[i]);
      out.emplace_back("head_opt.v.W", &s.head->optimizer.second_moments()[i]);
    }
  }
  return out;
}

}  // namespace

std::string checkpoint_bytes(const RunState& s) {
  ordered h;
  h["format"] = kFormat;
  h["version"] = kVersion;
  h["vocab_hash"] = Vocabulary::hash();
  h["dims"] = dims_header(s.policy.dims);
  h["seed"] = s.seed;
  h["step"] = s.step;
  h["warmup_step"] = s.warmup_step;
  h["has_reference"] = s.reference.has_value();
  h["policy_opt"] = opt_header(s.policy_opt);
  if (s.head) {
    ordered hj;
    hj["d"] = s.head->out_dim();
    hj["D"] = s.head->in_dim();
    hj["frozen"] = s.head->frozen;
    hj["opt"] = opt_header(s.head->optimizer);
    h["head"] = hj;
  } else {
    h["head"] = nullptr;
  }
  const auto arrays = param_arrays(s);
  ordered list = ordered::array();
  for (const auto& [name, t] : arrays) {
    ordered a;
    a["name"] = name;
    a["shape"] = t->shape();
    list.push_back(a);
  }
  h["arrays"] = list;
  std::string out = h.dump();
  out.push_back('\n');
  for (const auto& [name, t] : arrays) put_doubles(out, t->data());
  return out;
}

RunState checkpoint_parse(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw CheckpointError("corrupt checkpoint: header line not terminated");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError("corrupt checkpoint: header is not valid JSON");
  }
  if (field<std::string>(h, "format", "") != kFormat)
    throw CheckpointError("corrupt checkpoint: field 'format' is not " + std::string(kFormat));
  const int version = field<int>(h, "version", "");
  if (version != kVersion)
    throw CheckpointError("checkpoint field 'version' is " + std::to_string(version) +
                          ", expected " + std::to_string(kVersion));
  if (field<std::uint64_t>(h, "vocab_hash", "") != Vocabulary::hash())
    throw CheckpointError("checkpoint field 'vocab_hash' does not match this vocabulary");

  const auto& dj = h.contains("dims") ? h["dims"] : nlohmann::json();
  PolicyDims dims;
  dims.vocab = field<int>(dj, "vocab", "dims.");
  dims.d_model = field<int>(dj, "d_model", "dims.");
  dims.max_len = field<int>(dj, "max_len", "dims.");
  dims.layers = field<int>(dj, "layers", "dims.");
  dims.heads = field<int>(dj, "heads", "dims.");
  dims.ff_mult = field<int>(dj, "ff_mult", "dims.");
  try {
    dims.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint field 'dims' invalid: ") + e.what());
  }

  RunState s;
  s.policy = init_policy(dims, 0);
  s.seed = field<std::uint64_t>(h, "seed", "");
  s.step = field<std::uint64_t>(h, "step", "");
  s.warmup_step = field<std::uint64_t>(h, "warmup_step", "");
  if (field<bool>(h, "has_reference", "")) s.reference = s.policy;
  const auto& pj = h.contains("policy_opt") ? h["policy_opt"] : nlohmann::json();
  s.policy_opt = read_opt(pj, "policy_opt.");
  const auto policy_moments = field<std::size_t>(pj, "moments", "policy_opt.");
  const auto policy_steps = field<std::uint64_t>(pj, "steps", "policy_opt.");
  std::size_t head_moments = 0;
  std::uint64_t head_steps = 0;
  if (!h.contains("head")) throw CheckpointError("corrupt checkpoint: missing header field 'head'");
  if (!h["head"].is_null()) {
    const auto& hj = h["head"];
    const int d = field<int>(hj, "d", "head.");
    const int D = field<int>(hj, "D", "head.");
    if (D != dims.d_model)
      throw CheckpointError("checkpoint field 'head.D' does not match dims.d_model");
    const auto& oj = hj.contains("opt") ? hj["opt"] : nlohmann::json();
    s.head = make_head(d, D, 0);
    s.head->optimizer = read_opt(oj, "head.opt.");
    s.head->frozen = field<bool>(hj, "frozen", "head.");
    head_moments = field<std::size_t>(oj, "moments", "head.opt.");
    head_steps = field<std::uint64_t>(oj, "steps", "head.opt.");
  }

  // Moment buffers shaped like their parameters.
  std::vector<Tensor> pm, pv, hm, hv;
  const auto named = s.policy.named();
  if (policy_moments != 0 && policy_moments != named.size())
    throw CheckpointError("checkpoint field 'policy_opt.moments' does not match the parameter count");
  for (std::size_t i = 0; i < policy_moments; ++i) {
    pm.push_back(Tensor(named[i].second->shape()));
    pv.push_back(Tensor(named[i].second->shape()));
  }
  if (s.head) {
    if (head_moments > 1) throw CheckpointError("checkpoint field 'head.opt.moments' must be 0 or 1");
    for (std::size_t i = 0; i < head_moments; ++i) {
      hm.push_back(Tensor(s.head->W.shape()));
      hv.push_back(Tensor(s.head->W.shape()));
    }
  }

  std::vector<std::pair<std::string, Tensor*>> expected;
  for (auto& [n, t] : s.policy.named()) expected.emplace_back("policy." + n, t);
  if (s.reference)
    for (auto& [n, t] : s.reference->named()) expected.emplace_back("reference." + n, t);
  if (s.head) expected.emplace_back("head.W", &s.head->W);
  for (std::size_t i = 0; i < pm.size(); ++i) {
    expected.emplace_back("policy_opt.m." + named[i].first, &pm[i]);
    expected.emplace_back("policy_opt.v." + named[i].first, &pv[i]);
  }
  for (std::size_t i = 0; i < hm.size(); ++i) {
    expected.emplace_back("head_opt.m.W", &hm[i]);
    expected.emplace_back("head_opt.v.W", &hv[i]);
  }

  if (!h.contains("arrays") || !h["arrays"].is_array())
    throw CheckpointError("corrupt checkpoint: missing header field 'arrays'");
  const auto& arrays = h["arrays"];
  if (arrays.size() != expected.size())
    throw CheckpointError("corrupt checkpoint: field 'arrays' lists " + std::to_string(arrays.size()) +
                          " entries, expected " + std::to_string(expected.size()));
  std::size_t pos = nl + 1;
  for (std::size_t k = 0; k < expected.size(); ++k) {
    const auto& [name, t] = expected[k];
    if (field<std::string>(arrays[k], "name", "arrays[].") != name)
      throw CheckpointError("corrupt checkpoint: array " + std::to_string(k) + " should be '" + name + "'");
    if (field<Shape>(arrays[k], "shape", "arrays[].") != t->shape())
      throw CheckpointError("checkpoint array '" + name + "' has shape incompatible with dims");
    const std::size_t nbytes = t->size() * 8;
    if (pos + nbytes > bytes.size())
      throw CheckpointError("corrupt checkpoint: array '" + name + "' is truncated");
    for (std::size_t i = 0; i < t->size(); ++i) {
      std::uint64_t u = 0;
      for (int b = 0; b < 8; ++b)
        u |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + 8 * i + b])) << (8 * b);
      (*t)[i] = std::bit_cast<double>(u);
    }
    pos += nbytes;
  }
  if (pos != bytes.size())
    throw CheckpointError("corrupt checkpoint: " + std::to_string(bytes.size() - pos) +
                          " trailing bytes after the last array");
  s.policy_opt.restore(policy_steps, std::move(pm), std::move(pv));
  if (s.head) {
    s.head->optimizer.restore(head_steps, std::move(hm), std::move(hv));
    s.head->W.set_requires_grad(true);
  }
  s.policy.set_requires_grad(false);
  return s;
}

void checkpoint_save(const RunState& state, const std::string& path) {
  const std::string bytes = checkpoint_bytes(state);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open checkpoint for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing checkpoint: " + path);
}

RunState checkpoint_load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return checkpoint_parse(ss.str());
}

}  // namespace clipo
