// SPDX-License-Identifier: Apache-2.0
//
// Event adaptation: turn heterogeneous event attributes (item id, category
// id, frozen modality vector, action label) into dense model inputs.
//
// Per position, item/category/action ids index trainable embedding tables
// and the frozen modality vector passes through a trainable gated
// projector. The user input concatenates all four blocks; the item input
// is the same tensor without the trailing action block, so the two agree
// exactly on their shared slice. Gradients reach tables and projector
// only — never the modality vectors.
//
// The module can also run reduced to bare id lookups (enabled = false):
// the modality projector and the action slice disappear, user and item
// inputs coincide, and d_model shrinks accordingly. Ablation studies use
// this to measure what the adaptation extras contribute.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "histrec/config.hpp"
#include "histrec/datagen.hpp"
#include "histrec/ops.hpp"

namespace histrec::adapt {

struct AdaptConfig {
  bool enabled = true;    // false: id lookups only, no projector/action slice
  int item_dim = 24;
  int category_dim = 12;
  int modality_dim = 20;  // projector output width
  int action_dim = 8;
  int modality_in = 16;  // frozen vector width from the catalog
  int num_items = 0;
  int num_categories = 0;

  int d_model() const {
    return item_dim + category_dim + (enabled ? modality_dim + action_dim : 0);
  }
  int d_item() const { return d_model() - (enabled ? action_dim : 0); }

  static AdaptConfig from_config(const Config& c, const datagen::Catalog& catalog) {
    AdaptConfig a;
    a.enabled = c.get_bool("adapt.enabled");
    a.item_dim = static_cast<int>(c.get_int("adapt.item_dim"));
    a.category_dim = static_cast<int>(c.get_int("adapt.category_dim"));
    a.modality_dim = static_cast<int>(c.get_int("adapt.modality_dim"));
    a.action_dim = static_cast<int>(c.get_int("adapt.action_dim"));
    a.modality_in = catalog.modality_dim;
    a.num_items = catalog.num_items;
    a.num_categories = catalog.num_categories;
    a.validate();
    return a;
  }

  void validate() const {
    if (item_dim < 1 || category_dim < 1) {
      throw ConfigError("adapt: id embedding widths must be >= 1");
    }
    if (enabled && (modality_dim < 1 || action_dim < 1 || modality_in < 1)) {
      throw ConfigError("adapt: modality/action widths must be >= 1");
    }
    if (num_items < 1 || num_categories < 1) {
      throw ConfigError("adapt: catalog must contain items and categories");
    }
  }
};

// Trainable state. Table row 0 is reserved for padding/unknown ids; real
// id k lives at row k+1. The action table has one row per label (-1, +1).
struct AdaptParams {
  NodePtr item_table;      // [num_items+1, item_dim]
  NodePtr category_table;  // [num_categories+1, category_dim]
  NodePtr action_table;    // [2, action_dim]
  GluParams projector;     // modality_in -> modality_dim

  static AdaptParams init(const AdaptConfig& cfg, Rng& rng) {
    cfg.validate();
    AdaptParams p;
    const float table_std = 0.02f;
    p.item_table =
        make_param(Tensor::randn(rng, {cfg.num_items + 1, cfg.item_dim}, table_std));
    p.category_table =
        make_param(Tensor::randn(rng, {cfg.num_categories + 1, cfg.category_dim}, table_std));
    if (cfg.enabled) {
      p.action_table = make_param(Tensor::randn(rng, {2, cfg.action_dim}, table_std));
      p.projector = glu_init<float>(cfg.modality_in, cfg.modality_dim, rng);
    }
    return p;
  }

  std::vector<std::pair<std::string, NodePtr>> named_params() {
    std::vector<std::pair<std::string, NodePtr>> out = {
        {"adapt.item_table", item_table}, {"adapt.category_table", category_table}};
    if (action_table) {
      out.emplace_back("adapt.action_table", action_table);
      out.emplace_back("adapt.proj.w_gate", projector.w_gate);
      out.emplace_back("adapt.proj.b_gate", projector.b_gate);
      out.emplace_back("adapt.proj.w_value", projector.w_value);
      out.emplace_back("adapt.proj.b_value", projector.b_value);
    }
    return out;
  }
};

struct AdaptedBatch {
  NodePtr user_inputs;  // [B, T, d_model]; padded rows are zero vectors
  NodePtr item_inputs;  // [B, T, d_item]; padded rows are zero vectors
  NodePtr modality_leaf;  // frozen input, exposed for inspection
  std::vector<float> labels;  // [B*T], +1/-1 at valid slots, 0 at padding
  std::vector<int> lengths;   // [B]
  int B = 0;
  int T = 0;
};

inline AdaptedBatch adapt(const datagen::PaddedBatch& batch, const AdaptConfig& cfg,
                          const AdaptParams& params) {
  const size_t n = static_cast<size_t>(batch.B) * batch.T;

  // Shift ids by one: padding (-1) lands on the reserved row 0.
  std::vector<int32_t> item_idx(n), cat_idx(n), act_idx(n);
  for (size_t i = 0; i < n; ++i) {
    item_idx[i] = batch.item_ids[i] + 1;
    cat_idx[i] = batch.category_ids[i] + 1;
    act_idx[i] = batch.labels[i] > 0.0f ? 1 : 0;
  }

  const Shape lead{batch.B, batch.T};
  auto item_e = embedding_gather(params.item_table, item_idx, lead, "item_id");
  auto cat_e = embedding_gather(params.category_table, cat_idx, lead, "category_id");

  AdaptedBatch out;
  out.B = batch.B;
  out.T = batch.T;
  out.lengths = batch.lengths;
  out.labels = batch.labels;

  if (!cfg.enabled) {
    // Reduced form: ids only; user and item inputs are the same tensor.
    out.item_inputs = mask_rows(concat_last<float>({item_e, cat_e}), batch.lengths);
    out.user_inputs = out.item_inputs;
    return out;
  }

  if (batch.modality_dim != cfg.modality_in) {
    throw DataError("adapt: batch modality width " + std::to_string(batch.modality_dim) +
                    " != configured width " + std::to_string(cfg.modality_in));
  }
  auto act_e = embedding_gather(params.action_table, act_idx, lead, "action_label");

  auto mod_leaf = make_leaf(
      Tensor({batch.B, batch.T, cfg.modality_in}, batch.modality), /*requires_grad=*/false);
  auto mod_p = glu_block(mod_leaf, params.projector);

  out.modality_leaf = mod_leaf;
  out.item_inputs = mask_rows(concat_last<float>({item_e, cat_e, mod_p}), batch.lengths);
  out.user_inputs =
      mask_rows(concat_last<float>({item_e, cat_e, mod_p, act_e}), batch.lengths);
  return out;
}

}  // namespace histrec::adapt
