#pragma once

#include "chronotrack/adapter.hpp"
#include "chronotrack/backbone.hpp"
#include "chronotrack/eval.hpp"
#include "chronotrack/format.hpp"
#include "chronotrack/io.hpp"
#include "chronotrack/model.hpp"
#include "chronotrack/ops.hpp"
#include "chronotrack/params.hpp"
#include "chronotrack/rng.hpp"
#include "chronotrack/synthdata.hpp"
#include "chronotrack/tensor.hpp"
#include "chronotrack/tracker.hpp"
#include "chronotrack/training.hpp"
