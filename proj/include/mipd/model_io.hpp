#pragma once

#include <filesystem>
#include <string>
#include <variant>

#include <json.hpp>

#include "mipd/dataset.hpp"
#include "mipd/error.hpp"
#include "mipd/glmmtree.hpp"
#include "mipd/lmm.hpp"
#include "mipd/trees.hpp"

namespace mipd {

using Json = nlohmann::ordered_json;

Json to_json(const TreeParams& p);
Json to_json(const ForestParams& p);
Json to_json(const GlmmTreeParams& p);
Json to_json(const GlmmTreeFormula& f);
Json to_json(const BaggingParams& p);
Json to_json(const RegressionTree& t);
Json to_json(const Forest& f);
Json to_json(const LmmFit& f);
Json to_json(const ModelTree& t);
Json to_json(const GlmmTreeFit& f);
Json to_json(const BaggedGlmmTree& b);
Json to_json(const std::map<std::string, double>& m);

/// Parameter readers start from `defaults` and override the keys present;
/// unknown keys throw invalid_argument.
TreeParams tree_params_from_json(const Json& j, TreeParams defaults = {});
ForestParams forest_params_from_json(const Json& j, ForestParams defaults = {});
GlmmTreeParams glmm_params_from_json(const Json& j, GlmmTreeParams defaults = {});
GlmmTreeFormula formula_from_json(const Json& j, GlmmTreeFormula defaults = {});
BaggingParams bagging_params_from_json(const Json& j, BaggingParams defaults = {});

RegressionTree regression_tree_from_json(const Json& j);
Forest forest_from_json(const Json& j);
LmmFit lmm_fit_from_json(const Json& j);
ModelTree model_tree_from_json(const Json& j);
GlmmTreeFit glmm_tree_fit_from_json(const Json& j);
BaggedGlmmTree bagged_from_json(const Json& j);

/// Any model the CLI can train.
using AnyModel = std::variant<RegressionTree, Forest, LmmFit, GlmmTreeFit, BaggedGlmmTree>;

std::string_view model_kind(const AnyModel& m);  // cart, forest, lmm, glmmtree, bagged-glmmtree

/// {"kind": ..., "model": ...}
Json to_json(const AnyModel& m);
AnyModel any_model_from_json(const Json& j);

/// Conditional predictions (random intercepts included where the model has
/// them) for every record of `d`.
Eigen::VectorXd predict(const AnyModel& m, const Dataset& d);

Json read_json_file(const std::filesystem::path& path);
/// Writes via a temporary file and rename, so readers never see a partial file.
void write_json_file(const std::filesystem::path& path, const Json& j);

/// Checked field access used by the JSON readers.
template <typename T>
T json_get(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key))
    throw Error(Errc::invalid_argument, std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("field '") + key + "': " + e.what());
  }
}

}  // namespace mipd
