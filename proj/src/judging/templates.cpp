#include "prefarena/judging/templates.hpp"

#include <algorithm>

namespace prefarena::judging {

namespace {

const std::set<std::string>& known_slots() {
  static const std::set<std::string> slots = {
      "video", "description_1", "description_2", "reference", "reasoning"};
  return slots;
}

// Splits the template into literal text and slot names; calls `on_text` and
// `on_slot` in order.
template <typename OnText, typename OnSlot>
void scan(const std::string& text, OnText&& on_text, OnSlot&& on_slot) {
  std::size_t k = 0;
  while (k < text.size()) {
    const char c = text[k];
    if (c == '{') {
      if (k + 1 < text.size() && text[k + 1] == '{') {
        on_text('{');
        k += 2;
        continue;
      }
      const auto close = text.find('}', k);
      if (close == std::string::npos)
        throw ConfigError("template: unterminated '{' at offset " +
                          std::to_string(k));
      on_slot(text.substr(k + 1, close - k - 1));
      k = close + 1;
    } else if (c == '}') {
      if (k + 1 < text.size() && text[k + 1] == '}') {
        on_text('}');
        k += 2;
        continue;
      }
      throw ConfigError("template: stray '}' at offset " + std::to_string(k));
    } else {
      on_text(c);
      ++k;
    }
  }
}

}  // namespace

PromptTemplate::PromptTemplate(StepRole role, std::string text)
    : role_(role), text_(std::move(text)) {
  scan(
      text_, [](char) {},
      [this](const std::string& name) {
        if (!known_slots().count(name))
          throw ConfigError("template: unknown slot '{" + name + "}'");
        slots_.insert(name);
      });
}

std::string PromptTemplate::fill(
    const std::map<std::string, std::string>& values) const {
  std::string out;
  out.reserve(text_.size());
  scan(
      text_, [&](char c) { out += c; },
      [&](const std::string& name) {
        auto it = values.find(name);
        if (it == values.end())
          throw ConfigError("template: no value for slot '{" + name + "}'");
        out += it->second;
      });
  return out;
}

void PromptTemplate::require(const std::set<std::string>& required,
                             const std::set<std::string>& allowed,
                             const std::string& name) const {
  for (const auto& s : required)
    if (!slots_.count(s))
      throw ConfigError("template '" + name + "' lacks required slot '{" + s +
                        "}'");
  for (const auto& s : slots_)
    if (!allowed.count(s))
      throw ConfigError("template '" + name + "' may not use slot '{" + s +
                        "}'");
}

TemplateSet TemplateSet::defaults() {
  TemplateSet t;
  t.direct_prefer = PromptTemplate(
      StepRole::kPrefer,
      "{video}\n"
      "Watch the video and read the two descriptions of the character's "
      "emotional state below.\n"
      "Description 1: {description_1}\n"
      "Description 2: {description_2}\n"
      "Which description better reflects the character's emotional state? "
      "Answer with exactly one of: description 1, description 2, tie.");
  t.describe = PromptTemplate(
      StepRole::kDescribe,
      "{video}\n"
      "Describe the emotional state of the character in this video. Cite the "
      "facial, vocal and verbal cues that support your reading.");
  t.prefer_with_reference = PromptTemplate(
      StepRole::kPrefer,
      "Reference description of the character's emotional state:\n"
      "{reference}\n\n"
      "Description 1: {description_1}\n"
      "Description 2: {description_2}\n"
      "Which description agrees better with the reference? Answer with "
      "exactly one of: description 1, description 2, tie.");
  t.reason = PromptTemplate(
      StepRole::kReason,
      "Reference description of the character's emotional state:\n"
      "{reference}\n\n"
      "Description 1: {description_1}\n"
      "Description 2: {description_2}\n"
      "Compare each description with the reference step by step: which "
      "emotional cues does each one capture or miss? Do not give a final "
      "verdict yet.");
  t.prefer_from_reasoning = PromptTemplate(
      StepRole::kPreferFromReasoning,
      "Analysis of two emotion descriptions:\n"
      "{reasoning}\n\n"
      "Based on this analysis, which description better reflects the "
      "character's emotional state? Answer with exactly one of: "
      "description 1, description 2, tie.");
  return t;
}

void TemplateSet::validate() const {
  const std::set<std::string> pair = {"description_1", "description_2"};
  auto with = [&](std::initializer_list<std::string> extra) {
    auto s = pair;
    s.insert(extra);
    return s;
  };
  auto check_role = [](const PromptTemplate& t, StepRole role,
                       const std::string& name) {
    if (t.role() != role)
      throw ConfigError("template '" + name + "' has the wrong step role");
  };
  check_role(direct_prefer, StepRole::kPrefer, "direct_prefer");
  check_role(describe, StepRole::kDescribe, "describe");
  check_role(prefer_with_reference, StepRole::kPrefer, "prefer_with_reference");
  check_role(reason, StepRole::kReason, "reason");
  check_role(prefer_from_reasoning, StepRole::kPreferFromReasoning,
             "prefer_from_reasoning");
  direct_prefer.require(with({"video"}), with({"video"}), "direct_prefer");
  describe.require({"video"}, {"video"}, "describe");
  prefer_with_reference.require(with({"reference"}), with({"reference"}),
                                "prefer_with_reference");
  reason.require(with({"reference"}), with({"reference"}), "reason");
  prefer_from_reasoning.require({"reasoning"}, with({"reasoning"}),
                                "prefer_from_reasoning");
}

TemplateSet templates_from_json(const nlohmann::json& j, TemplateSet base) {
  auto take = [&](const char* key, StepRole role, PromptTemplate& dst) {
    if (j.contains(key)) dst = PromptTemplate(role, j.at(key).get<std::string>());
  };
  take("direct_prefer", StepRole::kPrefer, base.direct_prefer);
  take("describe", StepRole::kDescribe, base.describe);
  take("prefer_with_reference", StepRole::kPrefer, base.prefer_with_reference);
  take("reason", StepRole::kReason, base.reason);
  take("prefer_from_reasoning", StepRole::kPreferFromReasoning,
       base.prefer_from_reasoning);
  for (const auto& [key, v] : j.items()) {
    static const std::set<std::string> keys = {
        "direct_prefer", "describe", "prefer_with_reference", "reason",
        "prefer_from_reasoning"};
    if (!keys.count(key)) throw ConfigError("unknown template '" + key + "'");
  }
  base.validate();
  return base;
}

}  // namespace prefarena::judging
