#pragma once

#include "grokking/core.hpp"
#include "grokking/data.hpp"
#include "grokking/diagnostics.hpp"
#include "grokking/experiment.hpp"
#include "grokking/model.hpp"
#include "grokking/nnls.hpp"
#include "grokking/ntk.hpp"
#include "grokking/plot.hpp"
#include "grokking/ref_solvers.hpp"
#include "grokking/simplex.hpp"
#include "grokking/trainer.hpp"
