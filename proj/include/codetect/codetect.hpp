#pragma once

// Collaborative weakly supervised detection sandbox: a weakly supervised
// two-stream region scorer and a strongly supervised proposal detector
// trained jointly from image-level labels on a synthetic-shapes benchmark.

#include "codetect/box.hpp"
#include "codetect/checkpoint.hpp"
#include "codetect/consistency.hpp"
#include "codetect/dataset.hpp"
#include "codetect/errors.hpp"
#include "codetect/eval.hpp"
#include "codetect/gradcheck.hpp"
#include "codetect/model.hpp"
#include "codetect/pipeline.hpp"
#include "codetect/plot.hpp"
#include "codetect/registry.hpp"
#include "codetect/rng.hpp"
#include "codetect/runlog.hpp"
#include "codetect/smooth_l1.hpp"
#include "codetect/strong_detector.hpp"
#include "codetect/tape.hpp"
#include "codetect/tensor.hpp"
#include "codetect/weak_detector.hpp"
