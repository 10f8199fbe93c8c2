#pragma once

// Run configuration: a JSON tree with dotted-key overrides.
//
// Parsing is strict. Unknown keys and wrong types raise ConfigError naming
// the offending field. to_json() emits every field, so the echo of a run is
// a complete config that reproduces it.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "clae/attacks.hpp"
#include "clae/contrastive.hpp"
#include "clae/data.hpp"
#include "clae/encoder.hpp"
#include "clae/errors.hpp"
#include "clae/eval.hpp"
#include "clae/rng.hpp"
#include "clae/trainer.hpp"

namespace clae {

using Json = nlohmann::json;

enum class DatasetKind { synthetic, cifar10 };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic;
  // First N train records (0 = all); for synthetic data this caps the
  // generated set.
  std::size_t subset = 0;
  std::size_t test_subset = 0;
  // Dataset root for cifar10; empty falls back to $CLAE_DATA_DIR.
  std::string data_dir;
  SyntheticSpec synthetic;
  std::size_t synthetic_test_per_class = 100;
  // Noise seed of the synthetic train split; the test split uses seed + 1.
  std::uint64_t synthetic_seed = 1;
};

struct EvalConfig {
  std::size_t knn_k = 0;  // 0 = min(200, N_train / 10)
  double knn_temperature = 0.1;
  bool knn_weighted = true;
  std::size_t probe_epochs = 100;
  double probe_lr = 0.1;
  std::size_t probe_batch_size = 256;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out;
  DatasetConfig dataset;
  EncoderConfig encoder;
  TrainConfig train;
  EvalConfig eval;

  // Train config with the run seed applied.
  TrainConfig resolved_train() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }
};

namespace detail {

// Strict field reader for one JSON object.
class FieldReader {
 public:
  FieldReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  // Rejects keys that were never asked for.
  void finish() const {
    for (const auto& [key, _] : obj_.items())
      if (!seen_.count(key)) throw ConfigError(where(key) + ": unknown key");
  }

  std::optional<std::string> read_optional_string(const std::string& key) {
    if (!obj_.contains(key)) {
      seen_.insert(key);
      return std::nullopt;
    }
    std::string v;
    read(key, v);
    return v;
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("expected an integer");
        if constexpr (std::is_unsigned_v<T>)
          if (it->template get<long long>() < 0) throw ConfigError("expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("expected a string");
      }
      out = it->template get<T>();
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    } catch (const Json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  // Nested object, or nullptr if absent.
  const Json* child(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key) const {
    if (path_.empty()) return key.empty() ? "<root>" : key;
    return key.empty() ? path_ : path_ + "." + key;
  }

 private:
  const Json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Enum, typename Parse>
void read_enum(FieldReader& r, const std::string& key, Enum& out, Parse parse) {
  const std::optional<std::string> name = r.read_optional_string(key);
  if (!name) return;
  try {
    out = parse(*name);
  } catch (const std::exception&) {
    throw ConfigError(r.where(key) + ": unknown value '" + *name + "'");
  }
}

inline LossVariant parse_loss_variant(const std::string& s) {
  if (s == "plain") return LossVariant::plain;
  if (s == "simclr") return LossVariant::simclr;
  throw ContractViolation("bad loss variant");
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  throw ContractViolation("bad optimizer");
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "synthetic") return DatasetKind::synthetic;
  if (s == "cifar10") return DatasetKind::cifar10;
  throw ContractViolation("bad dataset kind");
}

inline const char* to_string(DatasetKind k) { return k == DatasetKind::synthetic ? "synthetic" : "cifar10"; }

}  // namespace detail

inline Json to_json(const EncoderConfig& c) {
  return Json{{"input_dim", c.input_dim},
              {"hidden_dims", c.hidden_dims},
              {"embed_dim", c.embed_dim},
              {"use_projection_head", c.use_projection_head},
              {"projection_dim", c.projection_dim}};
}

inline EncoderConfig encoder_config_from_json(const Json& j, const std::string& path = "encoder") {
  EncoderConfig c;
  detail::FieldReader r(j, path);
  r.read("input_dim", c.input_dim);
  if (const Json* h = r.child("hidden_dims")) {
    if (!h->is_array()) throw ConfigError(path + ".hidden_dims: expected an array");
    c.hidden_dims.clear();
    for (const auto& v : *h) {
      if (!v.is_number_integer() || v.get<long long>() < 1)
        throw ConfigError(path + ".hidden_dims: entries must be positive integers");
      c.hidden_dims.push_back(v.get<std::size_t>());
    }
  }
  r.read("embed_dim", c.embed_dim);
  r.read("use_projection_head", c.use_projection_head);
  r.read("projection_dim", c.projection_dim);
  r.finish();
  return c;
}

inline Json to_json(const RunConfig& c) {
  const TrainConfig& t = c.train;
  const AttackConfig& a = t.attack;
  const AugmentPolicy& g = t.augment;
  const SyntheticSpec& s = c.dataset.synthetic;
  return Json{
      {"seed", c.seed},
      {"out", c.out},
      {"dataset",
       {{"kind", detail::to_string(c.dataset.kind)},
        {"subset", c.dataset.subset},
        {"test_subset", c.dataset.test_subset},
        {"data_dir", c.dataset.data_dir},
        {"synthetic",
         {{"classes", s.classes},
          {"per_class", s.per_class},
          {"test_per_class", c.dataset.synthetic_test_per_class},
          {"channels", s.shape.channels},
          {"height", s.shape.height},
          {"width", s.shape.width},
          {"noise", s.noise},
          {"seed", c.dataset.synthetic_seed}}}}},
      {"encoder", to_json(c.encoder)},
      {"train",
       {{"alpha", t.alpha},
        {"batch_size", t.batch_size},
        {"epochs", t.epochs},
        {"optimizer", to_string(t.optimizer)},
        {"learning_rate", t.learning_rate},
        {"momentum", t.momentum_coef},
        {"weight_decay", t.weight_decay},
        {"bn_momentum_clean", t.bn_momentum_clean},
        {"bn_momentum_adv", t.bn_momentum_adv},
        {"attack_enabled", t.attack_enabled},
        {"share_bn_branches", t.share_bn_branches},
        {"update_adv_bn_stats", t.update_adv_bn_stats},
        {"adv_anchors_on_adv_branch", t.adv_anchors_on_adv_branch}}},
      {"attack",
       {{"method", to_string(a.method)},
        {"epsilon", a.epsilon},
        {"steps", a.steps},
        {"step_size", a.step_size},
        {"random_init", a.random_init},
        {"clip_min", a.clip_min},
        {"clip_max", a.clip_max}}},
      {"loss", {{"variant", to_string(t.loss.variant)}, {"tau", t.loss.tau}}},
      {"augment",
       {{"crop", g.crop},
        {"pad", g.pad},
        {"flip", g.flip},
        {"hflip_prob", g.hflip_prob},
        {"jitter", g.jitter},
        {"brightness", g.brightness},
        {"contrast", g.contrast},
        {"saturation", g.saturation},
        {"grayscale", g.grayscale},
        {"grayscale_prob", g.grayscale_prob},
        {"rotation", g.rotation}}},
      {"eval",
       {{"knn_k", c.eval.knn_k},
        {"knn_temperature", c.eval.knn_temperature},
        {"knn_weighted", c.eval.knn_weighted},
        {"probe_epochs", c.eval.probe_epochs},
        {"probe_lr", c.eval.probe_lr},
        {"probe_batch_size", c.eval.probe_batch_size}}}};
}

// Validates every section; failures become ConfigError.
inline void validate(const RunConfig& c) {
  try {
    c.encoder.validate();
    c.train.validate();
    require(c.train.epochs < 1000000, "train.epochs is unreasonably large");
    require(c.dataset.synthetic.classes >= 2, "dataset.synthetic.classes must be >= 2");
    require(c.dataset.synthetic.per_class >= 1, "dataset.synthetic.per_class must be >= 1");
    require(c.eval.knn_temperature > 0.0, "eval.knn_temperature must be > 0");
    require(c.eval.probe_lr > 0.0, "eval.probe_lr must be > 0");
    if (c.train.loss.variant == LossVariant::simclr)
      require(c.encoder.use_projection_head, "loss.variant=simclr needs encoder.use_projection_head");
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  detail::FieldReader root(j, "");
  root.read("seed", c.seed);
  root.read("out", c.out);
  if (const Json* d = root.child("dataset")) {
    detail::FieldReader r(*d, "dataset");
    detail::read_enum(r, "kind", c.dataset.kind, detail::parse_dataset_kind);
    r.read("subset", c.dataset.subset);
    r.read("test_subset", c.dataset.test_subset);
    r.read("data_dir", c.dataset.data_dir);
    if (const Json* s = r.child("synthetic")) {
      detail::FieldReader rs(*s, "dataset.synthetic");
      rs.read("classes", c.dataset.synthetic.classes);
      rs.read("per_class", c.dataset.synthetic.per_class);
      rs.read("test_per_class", c.dataset.synthetic_test_per_class);
      rs.read("channels", c.dataset.synthetic.shape.channels);
      rs.read("height", c.dataset.synthetic.shape.height);
      rs.read("width", c.dataset.synthetic.shape.width);
      rs.read("noise", c.dataset.synthetic.noise);
      rs.read("seed", c.dataset.synthetic_seed);
      rs.finish();
    }
    r.finish();
  }
  if (const Json* e = root.child("encoder")) c.encoder = encoder_config_from_json(*e);
  if (const Json* t = root.child("train")) {
    detail::FieldReader r(*t, "train");
    r.read("alpha", c.train.alpha);
    r.read("batch_size", c.train.batch_size);
    r.read("epochs", c.train.epochs);
    detail::read_enum(r, "optimizer", c.train.optimizer, detail::parse_optimizer);
    r.read("learning_rate", c.train.learning_rate);
    r.read("momentum", c.train.momentum_coef);
    r.read("weight_decay", c.train.weight_decay);
    r.read("bn_momentum_clean", c.train.bn_momentum_clean);
    r.read("bn_momentum_adv", c.train.bn_momentum_adv);
    r.read("attack_enabled", c.train.attack_enabled);
    r.read("share_bn_branches", c.train.share_bn_branches);
    r.read("update_adv_bn_stats", c.train.update_adv_bn_stats);
    r.read("adv_anchors_on_adv_branch", c.train.adv_anchors_on_adv_branch);
    r.finish();
  }
  if (const Json* a = root.child("attack")) {
    detail::FieldReader r(*a, "attack");
    AttackConfig& ac = c.train.attack;
    detail::read_enum(r, "method", ac.method, parse_attack_method);
    r.read("epsilon", ac.epsilon);
    r.read("steps", ac.steps);
    r.read("step_size", ac.step_size);
    r.read("random_init", ac.random_init);
    r.read("clip_min", ac.clip_min);
    r.read("clip_max", ac.clip_max);
    r.finish();
  }
  if (const Json* l = root.child("loss")) {
    detail::FieldReader r(*l, "loss");
    bool tau_given = l->contains("tau");
    detail::read_enum(r, "variant", c.train.loss.variant, detail::parse_loss_variant);
    if (!tau_given) c.train.loss.tau = LossConfig::defaults_for(c.train.loss.variant).tau;
    r.read("tau", c.train.loss.tau);
    r.finish();
  }
  if (const Json* g = root.child("augment")) {
    detail::FieldReader r(*g, "augment");
    AugmentPolicy& p = c.train.augment;
    r.read("crop", p.crop);
    r.read("pad", p.pad);
    r.read("flip", p.flip);
    r.read("hflip_prob", p.hflip_prob);
    r.read("jitter", p.jitter);
    r.read("brightness", p.brightness);
    r.read("contrast", p.contrast);
    r.read("saturation", p.saturation);
    r.read("grayscale", p.grayscale);
    r.read("grayscale_prob", p.grayscale_prob);
    r.read("rotation", p.rotation);
    r.finish();
  }
  if (const Json* ev = root.child("eval")) {
    detail::FieldReader r(*ev, "eval");
    r.read("knn_k", c.eval.knn_k);
    r.read("knn_temperature", c.eval.knn_temperature);
    r.read("knn_weighted", c.eval.knn_weighted);
    r.read("probe_epochs", c.eval.probe_epochs);
    r.read("probe_lr", c.eval.probe_lr);
    r.read("probe_batch_size", c.eval.probe_batch_size);
    r.finish();
  }
  root.finish();
  c.train.seed = c.seed;
  validate(c);
  return c;
}

// "a.b.c=value": value is parsed as JSON when possible, otherwise taken as a
// string.
inline void apply_override(Json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  Json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

inline Json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  try {
    return Json::parse(in, nullptr, true, true);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Echo used for reproduction; run_id ignores the output directory.
inline std::string config_echo(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline std::string run_id(const RunConfig& c) {
  Json j = to_json(c);
  j.erase("out");
  const std::uint64_t h = fnv1a64(std::to_string(c.seed), fnv1a64(j.dump()));
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace clae
