#pragma once

#include <vector>

namespace ktrace {

/// log Beta(a, b) via lgamma.
double log_beta(double a, double b);

/// Regularized incomplete beta function I_x(a, b).
double incomplete_beta(double a, double b, double x);

/// Two-sided p-value of a t statistic with `dof` degrees of freedom.
double student_t_pvalue_two_sided(double t, double dof);

/// log(sum_i exp(x_i)) computed stably.
double log_sum_exp(const std::vector<double>& xs);

/// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> average_ranks(const std::vector<double>& xs);

/// Spearman rank correlation.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

/// Area under the ROC curve of scores against binary labels (tie-aware).
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace ktrace
