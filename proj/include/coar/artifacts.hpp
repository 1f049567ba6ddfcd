#pragma once

#include "coar/backbone.hpp"
#include "coar/context.hpp"
#include "coar/persistence.hpp"
#include "coar/toyworld.hpp"

#include <nlohmann/json.hpp>

#include <vector>

namespace coar {

nlohmann::json to_json(const BackboneConfig& c);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);

// Backbone checkpoints carry the world description so later commands rebuild
// the exact codebook the weights were trained against.
Checkpoint backbone_checkpoint(const BackboneParams& p, const World& world,
                               const nlohmann::json& extra_meta = nlohmann::json::object());
BackboneParams backbone_from(const Checkpoint& c);
World world_from(const Checkpoint& backbone_ckpt);

Checkpoint bank_checkpoint(const ContextBank& b, const Vocabulary& vocab);
ContextBank bank_from(const Checkpoint& c);

Checkpoint priors_checkpoint(const std::vector<TokenSequence>& priors, TokenId class_name,
                             std::uint64_t seed);
std::vector<TokenSequence> priors_from(const Checkpoint& c, const Vocabulary& vocab);

}  // namespace coar
