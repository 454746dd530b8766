#pragma once

#include "nexop/analysis.hpp"
#include "nexop/autodiff.hpp"
#include "nexop/config.hpp"
#include "nexop/error.hpp"
#include "nexop/fft.hpp"
#include "nexop/forward.hpp"
#include "nexop/io.hpp"
#include "nexop/metrics.hpp"
#include "nexop/phantom.hpp"
#include "nexop/random.hpp"
#include "nexop/recon.hpp"
#include "nexop/sampling.hpp"
#include "nexop/tensor.hpp"
#include "nexop/train.hpp"
