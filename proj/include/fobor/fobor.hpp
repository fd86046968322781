#pragma once

#include "fobor/abs.hpp"
#include "fobor/cfr.hpp"
#include "fobor/decomposition.hpp"
#include "fobor/embedding_store.hpp"
#include "fobor/fixture.hpp"
#include "fobor/metrics.hpp"
#include "fobor/scoring.hpp"
#include "fobor/text_encoder.hpp"
#include "fobor/trainer.hpp"
