"""DynaMixer vision MLP."""
