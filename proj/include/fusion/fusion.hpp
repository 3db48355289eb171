#pragma once

#include "fusion/adam.hpp"
#include "fusion/alloc.hpp"
#include "fusion/data_io.hpp"
#include "fusion/dual.hpp"
#include "fusion/error.hpp"
#include "fusion/eval.hpp"
#include "fusion/experiment.hpp"
#include "fusion/fen.hpp"
#include "fusion/head.hpp"
#include "fusion/image.hpp"
#include "fusion/kmeans.hpp"
#include "fusion/log.hpp"
#include "fusion/meta_learner.hpp"
#include "fusion/params.hpp"
#include "fusion/random.hpp"
#include "fusion/replay.hpp"
#include "fusion/selftest.hpp"
#include "fusion/task_builder.hpp"
