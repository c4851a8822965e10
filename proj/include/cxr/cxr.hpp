#pragma once

#include "cxr/arch.hpp"
#include "cxr/autograd.hpp"
#include "cxr/classify.hpp"
#include "cxr/cost.hpp"
#include "cxr/data.hpp"
#include "cxr/errors.hpp"
#include "cxr/gradcheck.hpp"
#include "cxr/image.hpp"
#include "cxr/image_file.hpp"
#include "cxr/manifest.hpp"
#include "cxr/metrics.hpp"
#include "cxr/network.hpp"
#include "cxr/ops.hpp"
#include "cxr/rng.hpp"
#include "cxr/tensor.hpp"
#include "cxr/train.hpp"
#include "cxr/weights.hpp"
