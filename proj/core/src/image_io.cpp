#include "diffaug/image_io.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <filesystem>

#include <opencv2/imgcodecs.hpp>

namespace diffaug {

RawImage decode_image(const std::string& path) {
    require(std::filesystem::exists(path), ErrorKind::MissingFile, path);
    cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
    require(!m.empty(), ErrorKind::UndecodableImage, path);
    if (m.depth() != CV_8U) {
        cv::Mat tmp;
        const double scale = m.depth() == CV_16U ? 1.0 / 257.0 : 1.0;
        m.convertTo(tmp, CV_8U, scale);
        m = tmp;
    }
    RawImage img;
    img.height = m.rows;
    img.width = m.cols;
    img.channels = m.channels();
    img.pixels.resize(static_cast<size_t>(m.rows) * m.cols * m.channels());
    if (m.isContinuous()) {
        std::copy_n(m.data, img.pixels.size(), img.pixels.data());
    } else {
        for (int r = 0; r < m.rows; ++r)
            std::copy_n(m.ptr<uint8_t>(r), static_cast<size_t>(m.cols) * m.channels(),
                        img.pixels.data() + static_cast<size_t>(r) * m.cols * m.channels());
    }
    return img;
}

Tensor to_grayscale(const RawImage& raw) {
    require(raw.height > 0 && raw.width > 0 && raw.channels >= 1, ErrorKind::UndecodableImage,
            "empty image buffer");
    Tensor gray({raw.height, raw.width});
    const int c = raw.channels;
    for (int64_t p = 0; p < static_cast<int64_t>(raw.height) * raw.width; ++p) {
        const uint8_t* px = raw.pixels.data() + p * c;
        double v;
        if (c == 1) {
            v = px[0];
        } else if (c == 3 || c == 4) {
            // OpenCV decodes in BGR(A) order.
            v = 0.114 * px[0] + 0.587 * px[1] + 0.299 * px[2];
        } else {
            double s = 0;
            for (int k = 0; k < c; ++k) s += px[k];
            v = s / c;
        }
        gray[p] = v;
    }
    return gray;
}

Tensor bilinear_resize(const Tensor& gray, int out_h, int out_w) {
    require(gray.rank() == 2, ErrorKind::ShapeMismatch, "bilinear_resize: expected (H,W)");
    const int h = gray.dim(0), w = gray.dim(1);
    require(h > 0 && w > 0 && out_h > 0 && out_w > 0, ErrorKind::InvalidRange, "bilinear_resize: empty size");
    Tensor out({out_h, out_w});
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (int oy = 0; oy < out_h; ++oy) {
        const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, h - 1);
        const double ty = fy - y0;
        for (int ox = 0; ox < out_w; ++ox) {
            const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, w - 1);
            const double tx = fx - x0;
            const double top = gray[static_cast<int64_t>(y0) * w + x0] * (1 - tx) +
                               gray[static_cast<int64_t>(y0) * w + x1] * tx;
            const double bot = gray[static_cast<int64_t>(y1) * w + x0] * (1 - tx) +
                               gray[static_cast<int64_t>(y1) * w + x1] * tx;
            out[static_cast<int64_t>(oy) * out_w + ox] = top * (1 - ty) + bot * ty;
        }
    }
    return out;
}

Tensor preprocess_image(const RawImage& raw, int size) {
    Tensor gray = to_grayscale(raw);
    if (gray.dim(0) != size || gray.dim(1) != size) gray = bilinear_resize(gray, size, size);
    Tensor out({1, size, size});
    for (int64_t i = 0; i < gray.size(); ++i) out[i] = gray[i] / 127.5 - 1.0;
    return out;
}

Tensor load_pixel_tensor(const std::string& path, int size) {
    return preprocess_image(decode_image(path), size);
}

uint8_t pixel_to_byte(double v) {
    const double mapped = (std::clamp(v, -1.0, 1.0) + 1.0) * 127.5;
    const int prev = std::fegetround();
    std::fesetround(FE_TONEAREST);
    const double r = std::nearbyint(mapped);
    std::fesetround(prev);
    return static_cast<uint8_t>(std::clamp(r, 0.0, 255.0));
}

void write_grayscale_png(const std::string& path, const Tensor& image) {
    require(image.rank() == 3 && image.dim(0) == 1, ErrorKind::ShapeMismatch,
            "write_grayscale_png: expected (1,H,W), got " + image.shape_str());
    const int h = image.dim(1), w = image.dim(2);
    cv::Mat m(h, w, CV_8UC1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) m.at<uint8_t>(y, x) = pixel_to_byte(image[static_cast<int64_t>(y) * w + x]);
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    require(cv::imwrite(path, m), ErrorKind::IoError, "failed to write " + path);
}

}  // namespace diffaug
