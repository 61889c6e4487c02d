#pragma once

// Run configuration as a nested JSON document. Parsing is strict: unknown keys
// and wrongly typed values raise ConfigError naming the dotted key.

#include "gavatar/pipeline.hpp"

namespace gavatar::config {

struct Paths {
  std::string dataset;   // generated dataset directory
  std::string prior;     // prior checkpoint
  std::string inverted;  // inverted avatar checkpoint
  std::string avatar;    // avatar used by reenact / render-grid
};

struct Subject {
  int identity = 0;                 // dataset identity used as the few-shot subject
  int expression = 0;               // expression of the input shots
  std::vector<int> shots = {7, 2, 13};  // input views
};

struct Eval {
  std::vector<int> views;        // held-out views (all non-shot views when empty)
  std::vector<int> expressions;  // expressions used for novel-view / reenactment scoring (all when empty)
};

struct RunConfig {
  std::uint64_t seed = 0;
  synthdata::GenerateOptions data;
  std::vector<int> prior_identities;  // dataset identities for the prior (all but the subject when empty)
  std::vector<int> prior_views;       // training views (all when empty)
  pipeline::PriorConfig prior;
  pipeline::PersonalizationConfig personalize;
  Subject subject;
  Eval eval;
  Paths paths;

  /// Copies the top-level seed into every component config.
  void propagate_seed();
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Strict parse on top of the defaults; missing keys keep their defaults.
RunConfig from_json(const nlohmann::json& j);

/// Sets `dotted.key=value` in a document; the value is parsed as JSON when possible, otherwise kept
/// as a string. The key must exist in the default configuration.
void apply_override(nlohmann::json& doc, const std::string& assignment);

nlohmann::json to_json(const gapnet::NetConfig& c);
nlohmann::json to_json(const losses::LossWeights& w);
nlohmann::json to_json(const raster::RasterSettings& s);
nlohmann::json to_json(const headmodel::TemplateOptions& t);
gapnet::NetConfig net_from_json(const nlohmann::json& j);
headmodel::TemplateOptions template_from_json(const nlohmann::json& j);

}  // namespace gavatar::config
