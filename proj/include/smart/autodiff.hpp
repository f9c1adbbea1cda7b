#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "smart/common.hpp"

namespace smart::ad {

using Mat = Eigen::MatrixXd;

class Tape;

// Handle into a tape. Valid only for the tape that created it.
struct Value {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

// Reverse-mode tape over double matrices. Ops append nodes whose backward
// closures scatter into child gradients; with gradients disabled the same ops
// compute values only, which is how teacher/eval forwards run.
class Tape {
  public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    // Leaf borrowing external storage (parameters). The referenced matrix must
    // outlive the tape.
    Value param(const Mat& external);
    // Leaf owning a copy (inputs, constants).
    Value input(Mat v);

    Value matmul(Value a, Value b);
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value add_row(Value x, Value row);   // broadcast 1xC row over rows
    Value mul_row(Value x, Value row);   // broadcast per-channel scale
    Value scale(Value x, double c);
    Value linear(Value x, Value w, Value b) { return add_row(matmul(x, w), b); }

    Value layer_norm(Value x, Value gamma, Value beta, double eps = 1e-5);
    Value gelu(Value x);  // exact (erf) form

    Value gather_rows(Value x, std::vector<int> idx);
    Value slice_rows(Value x, int begin, int count);
    Value concat_cols(const std::vector<Value>& xs);
    Value concat_rows(const std::vector<Value>& xs);
    // Rows listed in idx are replaced by the (1xC) row value; their gradient
    // flows to `row`, not to `x`.
    Value replace_rows(Value x, std::vector<int> idx, Value row);
    Value mean_rows(Value x);  // 1xC

    // Block-diagonal multi-head attention over consecutive windows of win_len
    // rows. bias (optional) is win_len^2 x heads, added per head as
    // bias(i*win_len+j, h); win_masks (optional) are per-window additive logit
    // masks of shape win_len x win_len.
    Value windowed_attention(Value q, Value k, Value v, int heads, int win_len,
                             Value bias = {},
                             std::shared_ptr<const std::vector<Mat>> win_masks = nullptr);

    // Multi-head attention with the last row of z as the only query.
    // Returns the attended, output-projected query row (1xD); writes the
    // head-averaged attention probabilities (1 x N+1) to *probs_out and the
    // per-head rows (heads x N+1) to *per_head_out when non-null.
    Value cls_attention(Value z, Value wq, Value bq, Value wk, Value bk, Value wv, Value bv,
                        Value wo, Value bo, int heads, Eigen::RowVectorXd* probs_out = nullptr,
                        Mat* per_head_out = nullptr);

    // Mean over `rows` of the cross-entropy between softmax(logits*inv_tau)
    // and constant target rows; log clamped below at `clamp`. Empty rows -> 0.
    Value ce_const_mean(Value logits, Mat targets, std::vector<int> rows, double inv_tau,
                        double clamp = 1e-12);

    // Mean absolute error over the listed (row, col) entries. Empty -> 0.
    Value l1_mean_at(Value pred, Mat target, std::vector<std::pair<int, int>> elems);

    // Scalar combination of 1x1 values.
    Value weighted_sum(const std::vector<std::pair<Value, double>>& terms);
    Value zero_scalar();
    // 0.5 * sum of squared entries, as a 1x1 value.
    Value sum_squares(Value x);

    const Mat& val(Value v) const;
    double scalar(Value v) const;
    // Gradient of a leaf/intermediate after backward(); zero-size if untouched.
    const Mat& grad(Value v) const;

    // Total gradient over all leaves bound to this external matrix.
    Mat external_grad(const Mat& m) const;
    // Visits every external-leaf gradient (after backward); a matrix bound by
    // several leaves is visited once per leaf.
    void for_each_external_grad(
        const std::function<void(const Mat* external, const Mat& grad)>& fn) const;

    void backward(Value loss);

    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Mat owned;
        const Mat* external = nullptr;
        Mat grad;
        std::function<void(Tape&)> backward;
    };

    Value push(Mat v) {
        nodes_.push_back(Node{std::move(v), nullptr, {}, {}});
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    Mat& grad_ref(Value v);
    bool has_grad(Value v) const { return nodes_[static_cast<size_t>(v.idx)].grad.size() != 0; }

    void set_backward(Value v, std::function<void(Tape&)> fn) {
        if (grad_enabled_) nodes_[static_cast<size_t>(v.idx)].backward = std::move(fn);
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
    static const Mat empty_;
};

// Rowwise softmax done in place, returning the input reference.
Mat& softmax_rows_inplace(Mat& m);

}  // namespace smart::ad
