#pragma once

#include <string>

#include "latentmark/tensor.hpp"

namespace latentmark {

// File formats:
//  * .pgm  — binary PGM (P5), single channel, maxval 255
//  * .ppm  — binary PPM (P6), three channels, maxval 255
//  * .lmf1 — little-endian float64 tensor container: magic "LMF1",
//            three uint32 (c, h, w), then c*h*w doubles, row-major planes.
//            Used for latents always, and for images whose channel count has
//            no portable pixmap (pixels stored as exact integers).

// ".pgm" for c==1, ".ppm" for c==3, ".lmf1" otherwise.
std::string image_extension_for(const Shape& s);

void save_image(const ImageTensor& img, const std::string& path);
ImageTensor load_image(const std::string& path);

void save_latent_lmf1(const LatentTensor& z, const std::string& path);
LatentTensor load_latent_lmf1(const std::string& path);

}  // namespace latentmark
