#include "diffaug/tensor.hpp"

#include <cmath>
#include <sstream>

namespace diffaug {

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

size_t Tensor::offset(std::initializer_list<int> idx) const {
    require(idx.size() == shape_.size(), ErrorKind::ShapeMismatch, "index rank mismatch");
    size_t off = 0;
    size_t i = 0;
    for (int v : idx) {
        off = off * static_cast<size_t>(shape_[i]) + static_cast<size_t>(v);
        ++i;
    }
    return off;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

const char* error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::MissingFile: return "MissingFile";
        case ErrorKind::ParseError: return "ParseError";
        case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
        case ErrorKind::DuplicatePath: return "DuplicatePath";
        case ErrorKind::UndecodableImage: return "UndecodableImage";
        case ErrorKind::ClassTooSmall: return "ClassTooSmall";
        case ErrorKind::ClassMismatch: return "ClassMismatch";
        case ErrorKind::InvalidRange: return "InvalidRange";
        case ErrorKind::NonPositiveT: return "NonPositiveT";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::TimestepOutOfRange: return "TimestepOutOfRange";
        case ErrorKind::TimestepOrderError: return "TimestepOrderError";
        case ErrorKind::OddDimension: return "OddDimension";
        case ErrorKind::ClassOutOfRange: return "ClassOutOfRange";
        case ErrorKind::EmptySplit: return "EmptySplit";
        case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorKind::LengthMismatch: return "LengthMismatch";
        case ErrorKind::UnknownLayer: return "UnknownLayer";
        case ErrorKind::DimensionMismatch: return "DimensionMismatch";
        case ErrorKind::NonPSDProduct: return "NonPSDProduct";
        case ErrorKind::TooFewSamples: return "TooFewSamples";
        case ErrorKind::CheckpointError: return "CheckpointError";
        case ErrorKind::ConfigError: return "ConfigError";
        case ErrorKind::IoError: return "IoError";
    }
    return "Error";
}

}  // namespace diffaug
