#pragma once

#include <map>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "prefarena/judging/backend.hpp"

namespace prefarena::judging {

// Prompt text with {slot} placeholders. "{{" and "}}" are literal braces.
// Known slots: video, description_1, description_2, reference, reasoning.
class PromptTemplate {
 public:
  PromptTemplate() = default;
  PromptTemplate(StepRole role, std::string text);

  StepRole role() const { return role_; }
  const std::string& text() const { return text_; }
  const std::set<std::string>& slots() const { return slots_; }
  bool has_slot(const std::string& name) const { return slots_.count(name) > 0; }

  // Every slot in the template must be present in `values`.
  std::string fill(const std::map<std::string, std::string>& values) const;

  // Throws ConfigError if a required slot is missing or a slot falls
  // outside `allowed`.
  void require(const std::set<std::string>& required,
               const std::set<std::string>& allowed,
               const std::string& name) const;

 private:
  StepRole role_ = StepRole::kPrefer;
  std::string text_;
  std::set<std::string> slots_;
};

// One template per pipeline step.
struct TemplateSet {
  PromptTemplate direct_prefer;          // S1
  PromptTemplate describe;               // S2-S4 step 1
  PromptTemplate prefer_with_reference;  // S2/S3 step 2
  PromptTemplate reason;                 // S4 step 2
  PromptTemplate prefer_from_reasoning;  // S4 step 3

  static TemplateSet defaults();
  void validate() const;
};

// Overrides any of the five templates from {"direct_prefer": "...", ...}.
TemplateSet templates_from_json(const nlohmann::json& j,
                                TemplateSet base = TemplateSet::defaults());

}  // namespace prefarena::judging
