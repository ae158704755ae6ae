#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>

#include "nas/genotype.hpp"

namespace nas {

/// Raised when the next fitness evaluation cannot be paid for in full.
class BudgetExhausted : public std::runtime_error {
 public:
  explicit BudgetExhausted(const std::string& what) : std::runtime_error(what) {}
};

/// Black-box maximization target as seen by a search algorithm. Algorithms
/// pass raw genotypes; any repair happens behind this interface.
class Objective {
 public:
  virtual ~Objective() = default;
  /// Throws BudgetExhausted when the evaluation cannot be afforded.
  virtual double evaluate(const Genotype& genotype) = 0;
};

/// Wraps a plain function with a cap on the number of calls.
class FunctionObjective final : public Objective {
 public:
  FunctionObjective(std::function<double(const Genotype&)> fn, std::size_t max_evaluations)
      : fn_(std::move(fn)), max_evaluations_(max_evaluations) {}

  double evaluate(const Genotype& genotype) override {
    if (calls_ >= max_evaluations_) throw BudgetExhausted("evaluation cap reached");
    ++calls_;
    return fn_(genotype);
  }
  std::size_t calls() const { return calls_; }

 private:
  std::function<double(const Genotype&)> fn_;
  std::size_t max_evaluations_;
  std::size_t calls_ = 0;
};

}  // namespace nas
