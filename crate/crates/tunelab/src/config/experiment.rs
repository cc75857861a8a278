// filled in after the component traits exist
