#pragma once

#include "fsvlm/adaptation.hpp"
#include "fsvlm/archive.hpp"
#include "fsvlm/autograd.hpp"
#include "fsvlm/backbone.hpp"
#include "fsvlm/dataset.hpp"
#include "fsvlm/errors.hpp"
#include "fsvlm/experiment.hpp"
#include "fsvlm/fewshot.hpp"
#include "fsvlm/image.hpp"
#include "fsvlm/metrics.hpp"
#include "fsvlm/parameters.hpp"
#include "fsvlm/random.hpp"
#include "fsvlm/trainer.hpp"
