#pragma once

#include "hmmrec/changepoint.hpp"
#include "hmmrec/common.hpp"
#include "hmmrec/dataset.hpp"
#include "hmmrec/eval.hpp"
#include "hmmrec/factorization.hpp"
#include "hmmrec/hmm.hpp"
#include "hmmrec/incidence.hpp"
#include "hmmrec/pipeline.hpp"
#include "hmmrec/recommend.hpp"
