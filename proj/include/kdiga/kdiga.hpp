#pragma once

#include "kdiga/errors.hpp"
#include "kdiga/rng.hpp"
#include "kdiga/autodiff.hpp"
#include "kdiga/diffmodel.hpp"
#include "kdiga/checkpoint.hpp"
#include "kdiga/hashing.hpp"
#include "kdiga/losses.hpp"
#include "kdiga/attacks.hpp"
#include "kdiga/distiller.hpp"
#include "kdiga/analysis.hpp"
#include "kdiga/data.hpp"
#include "kdiga/config.hpp"
#include "kdiga/evaluate.hpp"
#include "kdiga/plot.hpp"
#include "kdiga/experiment.hpp"
