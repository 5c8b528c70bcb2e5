#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpkfc/data.hpp"
#include "dpkfc/nn.hpp"
#include "dpkfc/trainer.hpp"

namespace dpkfc::config {

using Json = nlohmann::json;

/// Every schema violation found in a config document.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

/// The complete default document. Its key set is the schema: unknown keys are
/// rejected and value types must match (null marks an optional number).
Json defaults();

/// Applies "key.path=value" overrides; the value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(Json& doc, const std::string& assignment);

/// defaults() <- user document <- overrides, then validated. Throws ConfigError
/// listing every problem.
Json resolve(const Json& user, const std::vector<std::string>& overrides = {});

/// Semantic and structural checks; returns all problems (empty when valid).
std::vector<std::string> validate(const Json& resolved);

/// Typed views of a resolved document.
nn::Model build_model(const Json& resolved, const nn::Shape& input, std::size_t num_classes);
data::Dataset build_dataset(const Json& resolved);
data::BlobsSpec blobs_spec(const Json& dataset_section);
train::TrainConfig build_train_config(const Json& resolved, const data::Dataset& dataset);
kfac::KfacConfig build_kfac_config(const Json& resolved);

/// Layer list for a named preset ("mnist_cnn", "small_cnn", "mlp").
std::vector<nn::LayerSpec> preset_layers(const std::string& name, const nn::Shape& input, std::size_t num_classes,
                                         std::size_t hidden);

}  // namespace dpkfc::config
